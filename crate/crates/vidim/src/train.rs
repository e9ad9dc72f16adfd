//! Training loop driver: batches from disk or the synthetic stream,
//! NDJSON logging and periodic checkpoints.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vidim_core::conditioning::CLIP_FRAMES;
use vidim_core::resample::area_downsample;
use vidim_core::synth::training_example;
use vidim_core::training::{train_step, Example, StepStats, TrainConfig, TrainState};
use vidim_core::Tensor;

use crate::checkpoint::save_state;
use crate::clipio::load_clip;
use crate::error::{IoContext, Result, VidimError};

/// Newline-delimited JSON appender.
pub struct Ndjson {
    path: PathBuf,
    out: BufWriter<fs::File>,
}

impl Ndjson {
    pub fn create(path: &Path) -> Result<Self> {
        Self::open(path, false)
    }

    pub fn append(path: &Path) -> Result<Self> {
        Self::open(path, true)
    }

    fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path).at(path)?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| VidimError::Format(e.to_string()))?;
        self.out.write_all(b"\n").at(&self.path)?;
        self.out.flush().at(&self.path)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Seconds since the start of this process's run.
    pub wall_time: f64,
}

/// Where training clips come from.
pub enum TrainData {
    /// The synthetic training stream over `size` clips, rendered at
    /// `resolution`.
    Stream { seed: u64, size: u64, resolution: usize },
    /// Clip directories, visited in order.
    Disk { clips: Vec<PathBuf> },
}

/// Bring a clip to `resolution` by area downsampling an integer multiple.
pub fn fit_resolution(clip: Tensor<f32>, resolution: usize) -> Result<Tensor<f32>> {
    let have = clip.dim(2);
    if have == resolution {
        return Ok(clip);
    }
    if resolution == 0 || !have.is_multiple_of(resolution) {
        return Err(VidimError::Config(format!("{have} px clips cannot feed a {resolution} px model")));
    }
    Ok(area_downsample(&clip, (have / resolution) as f64)?)
}

impl TrainData {
    pub fn len(&self) -> u64 {
        match self {
            TrainData::Stream { size, .. } => *size,
            TrainData::Disk { clips } => clips.len() as u64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch `step`: dataset indices `step * B .. step * B + B`, wrapping.
    pub fn batch(&self, step: u64, batch_size: usize, resolution: usize) -> Result<Vec<Example<f32>>> {
        if self.is_empty() {
            return Err(VidimError::Config("training set is empty".into()));
        }
        (0..batch_size as u64)
            .map(|i| {
                let id = (step * batch_size as u64 + i) % self.len();
                let clip = match self {
                    TrainData::Stream { seed, resolution: r, .. } => training_example(*seed, id, *r)?.frames,
                    TrainData::Disk { clips } => load_clip(&clips[id as usize])?.0.frames,
                };
                debug_assert_eq!(clip.dim(0), CLIP_FRAMES);
                Ok(Example { id, clip: fit_resolution(clip, resolution)? })
            })
            .collect()
    }
}

pub struct LoopOptions<'a> {
    pub log: Option<&'a mut Ndjson>,
    /// Checkpoint file and cadence in steps; the last step is always saved.
    pub checkpoint: Option<(PathBuf, u64)>,
    /// Console progress cadence; 0 disables.
    pub report_every: u64,
}

/// Train from `state.step` up to `cfg.total_steps`.
pub fn run_training(state: &mut TrainState<f32>, cfg: &TrainConfig, data: &TrainData, mut opts: LoopOptions<'_>) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    let resolution = state.model.config().resolution;
    let start = Instant::now();
    let mut history = Vec::new();
    let mut window = 0.0;
    while state.step < cfg.total_steps {
        let batch = data.batch(state.step, cfg.batch_size, resolution)?;
        let stats = train_step(state, cfg, &batch)?;
        let wall_time = start.elapsed().as_secs_f64();
        if let Some(log) = opts.log.as_deref_mut() {
            log.write(&TrainLogRecord { step: stats.step, loss: stats.loss, lr: stats.lr, grad_norm: stats.grad_norm, wall_time })?;
        }
        window += stats.loss;
        if opts.report_every > 0 && stats.step % opts.report_every == 0 {
            log::info!(
                "step {} loss {:.4} lr {:.2e} grad_norm {:.3} ({:.0}s)",
                stats.step,
                window / opts.report_every as f64,
                stats.lr,
                stats.grad_norm,
                wall_time
            );
            window = 0.0;
        }
        if let Some((path, every)) = &opts.checkpoint {
            if (*every > 0 && stats.step % every == 0) || stats.step == cfg.total_steps {
                save_state(path, state, cfg.stage, cfg.cfg_drop_prob)?;
            }
        }
        history.push(stats);
    }
    Ok(history)
}
