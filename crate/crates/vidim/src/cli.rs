//! Command implementations behind the `vidim` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vidim_core::cascade::CascadeConfig;
use vidim_core::conditioning::{ConditioningPair, CLIP_FRAMES, GENERATED_FRAMES};
use vidim_core::denoiser::Denoiser;
use vidim_core::metrics::{mean, summarize, Protocol};
use vidim_core::sampler::{GuidanceMode, SamplerConfig};
use vidim_core::synth::VideoClip;
use vidim_core::training::{Stage, TrainState};
use vidim_core::Tensor;

use crate::checkpoint::{config_hash, load_sampling_model, load_state, CheckpointMeta};
use crate::clipio::{load_clip, make_split, read_frame, read_manifest, save_clip, ClipMeta, MANIFEST_FILE, SPLITS};
use crate::config::{ConditioningKind, ModelSpec, RunConfig, RunRecord};
use crate::error::{IoContext, Result, VidimError};
use crate::eval::{diversity, evaluate_dirs, record_json, summary_json, Generator};
use crate::train::{fit_resolution, run_training, LoopOptions, Ndjson, TrainData};

pub const DEVICE_ENV: &str = "VIDIM_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "vidim", version, about = "Video frame interpolation with cascaded diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set sampler.steps=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ModeArg {
    Cfg,
    Imputation,
    Recon,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ProtocolArg {
    Middle,
    All7,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train, linear and ambiguous splits.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the base stage.
    TrainBase {
        #[command(flatten)]
        common: Common,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the super-resolution stage.
    TrainSr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Interpolate 7 frames between two frames.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Clip directory whose first and last frames condition the sample.
        #[arg(long, conflicts_with_all = ["start", "end"])]
        clip: Option<PathBuf>,
        /// Start frame (PNG).
        #[arg(long, requires = "end")]
        start: Option<PathBuf>,
        /// End frame (PNG).
        #[arg(long, requires = "start")]
        end: Option<PathBuf>,
        /// Output clip directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Guidance weight (CFG or reconstruction guidance).
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run the super-resolution stage as well.
        #[arg(long)]
        cascade: bool,
    },
    /// Score a split with PSNR and SSIM.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        max_clips: Option<usize>,
        #[arg(long)]
        cascade: bool,
    },
    /// Compare the conditional model with the unconditional model under
    /// imputation and reconstruction guidance across guidance weights.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn push<T: std::fmt::Display>(v: &mut Vec<String>, key: &str, value: Option<T>) {
    if let Some(value) = value {
        v.push(format!("{key}={value}"));
    }
}

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Fail unless the accelerator selection is the CPU.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.is_empty() && !d.eq_ignore_ascii_case("cpu") => {
            Err(VidimError::Usage(format!("{DEVICE_ENV}={d} is not supported; only \"cpu\" is available")))
        }
        _ => Ok(()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::MakeData { common } => make_data(&resolve(&common, vec![])?),
        Command::TrainBase { common, resume } => train(&resolve(&common, vec![])?, Stage::Base, resume),
        Command::TrainSr { common, resume } => train(&resolve(&common, vec![])?, Stage::Sr, resume),
        Command::Sample { common, clip, start, end, out, mode, guidance, steps, seed, cascade } => {
            let mut o = vec![];
            push(&mut o, "sampler.mode", mode.map(|m| quoted(&format!("{m:?}").to_lowercase())));
            push(&mut o, "sampler.weight", guidance);
            push(&mut o, "sampler.steps", steps);
            push(&mut o, "sampler.seed", seed);
            if cascade {
                o.push("cascade.enabled=true".into());
            }
            let cfg = resolve(&common, o)?;
            let cond = match (clip, start, end) {
                (Some(dir), _, _) => ConditioningPair::from_clip(&load_clip(&dir)?.0.frames)?,
                (None, Some(s), Some(e)) => ConditioningPair::new(read_frame(&s)?, read_frame(&e)?)?,
                _ => return Err(VidimError::Usage("sample needs --clip or both --start and --end".into())),
            };
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.join("sample"));
            sample(&cfg, &cond, &out)
        }
        Command::Eval { common, protocol, split, max_clips, cascade } => {
            let mut o = vec![];
            push(&mut o, "eval.protocol", protocol.map(|p| quoted(&format!("{p:?}").to_lowercase())));
            push(&mut o, "eval.split", split.as_deref().map(quoted));
            push(&mut o, "eval.max_clips", max_clips);
            if cascade {
                o.push("cascade.enabled=true".into());
            }
            eval(&resolve(&common, o)?)
        }
        Command::Ablate { common } => ablate(&resolve(&common, vec![])?),
    }
}

/// File, then `--set` overrides, then command flags.
fn resolve(common: &Common, flags: Vec<String>) -> Result<RunConfig> {
    let mut all = common.set.clone();
    all.extend(flags);
    RunConfig::resolve(common.config.as_deref(), &all)
}

fn make_data(cfg: &RunConfig) -> Result<()> {
    let root = &cfg.paths.data_dir;
    let rec = RunRecord::start(root, "make-data", cfg)?;
    let mut counts = serde_json::Map::new();
    for split in SPLITS {
        let n = if split == "train" { cfg.data.train_clips } else { cfg.data.eval_clips };
        let manifest = make_split(root, split, n, cfg.data.resolution, cfg.seed)?;
        log::info!("{split}: {n} clips, manifest {}", manifest.display());
        counts.insert(split.into(), json!(n));
    }
    rec.finish(json!({ "clips": counts, "resolution": cfg.data.resolution }))
}

fn train(cfg: &RunConfig, stage: Stage, resume: bool) -> Result<()> {
    let (model_cfg, section, conditioning) = match stage {
        Stage::Base => (cfg.base_model()?, &cfg.train_base, cfg.model.base_conditioning),
        Stage::Sr => (cfg.sr_model()?, &cfg.train_sr, ConditioningKind::StartEnd),
    };
    let tcfg = section.to_core(stage, cfg.seed);
    let ckpt = cfg.checkpoint_path(stage, conditioning);
    let command = format!("train-{}{}", stage.name(), if conditioning == ConditioningKind::Unconditional { "-uncond" } else { "" });
    let rec = RunRecord::start(&cfg.paths.checkpoint_dir, &command, cfg)?;
    let mut state = if ckpt.exists() {
        if !resume {
            return Err(VidimError::Usage(format!("{} exists; pass --resume or remove it", ckpt.display())));
        }
        let (state, meta) = load_state(&ckpt)?;
        let expected = config_hash(&ModelSpec::from(&model_cfg), stage, tcfg.cfg_drop_prob);
        if meta.config_hash != expected {
            return Err(VidimError::Config(format!(
                "{} was trained with a different model or stage configuration (hash {} vs {expected})",
                ckpt.display(),
                meta.config_hash
            )));
        }
        log::info!("resuming {} at step {}", ckpt.display(), state.step);
        state
    } else {
        TrainState::new(Denoiser::new(model_cfg, cfg.seed)?, cfg.seed)
    };
    let data = match cfg.data.source {
        crate::config::DataSource::Stream => {
            TrainData::Stream { seed: cfg.seed, size: cfg.data.train_clips as u64, resolution: cfg.data.resolution }
        }
        crate::config::DataSource::Disk => TrainData::Disk { clips: read_manifest(&cfg.paths.data_dir.join("train").join(MANIFEST_FILE))? },
    };
    log::info!("{} parameters, {} training clips", state.model.num_params(), data.len());
    let log_path = cfg.paths.checkpoint_dir.join(format!("{command}.log.ndjson"));
    let mut log = if resume { Ndjson::append(&log_path)? } else { Ndjson::create(&log_path)? };
    let opts = LoopOptions { log: Some(&mut log), checkpoint: Some((ckpt.clone(), section.checkpoint_every)), report_every: section.log_every };
    let history = run_training(&mut state, &tcfg, &data, opts)?;
    rec.finish(json!({
        "checkpoint": ckpt,
        "final_step": state.step,
        "steps_this_run": history.len(),
        "final_loss": history.last().map(|s| s.loss),
    }))
}

fn warn_unguided(meta: &CheckpointMeta, sampler: &SamplerConfig, what: &str) {
    if sampler.mode == GuidanceMode::Cfg && sampler.weight != 1.0 && meta.cfg_drop_prob == 0.0 {
        log::warn!("{what} was trained with cfg_drop_prob = 0; its unconditional branch is untrained and CFG weight {} is unreliable", sampler.weight);
    }
}

fn base_checkpoint(cfg: &RunConfig, conditioning: ConditioningKind) -> Result<(Denoiser<f32>, CheckpointMeta)> {
    load_sampling_model(&cfg.checkpoint_path(Stage::Base, conditioning))
}

fn generator(cfg: &RunConfig) -> Result<Generator> {
    let sampler = cfg.sampler.to_core();
    let conditioning = match sampler.mode {
        GuidanceMode::Cfg => ConditioningKind::StartEnd,
        _ => ConditioningKind::Unconditional,
    };
    let (base, meta) = base_checkpoint(cfg, conditioning)?;
    warn_unguided(&meta, &sampler, "the base model");
    if !cfg.cascade.enabled {
        return Ok(Generator::Single { model: base, sampler });
    }
    let (sr, sr_meta) = load_sampling_model(&cfg.checkpoint_path(Stage::Sr, ConditioningKind::StartEnd))?;
    let sr_sampler = SamplerConfig { steps: cfg.cascade.sr_steps, mode: GuidanceMode::Cfg, weight: cfg.cascade.sr_weight, seed: sampler.seed };
    warn_unguided(&sr_meta, &sr_sampler, "the super-resolution model");
    Ok(Generator::Cascade { base, sr, cfg: CascadeConfig { base_sampler: sampler, sr_sampler, sr_aug_level: cfg.cascade.sr_aug_level } })
}

fn sample(cfg: &RunConfig, cond: &ConditioningPair<f32>, out: &Path) -> Result<()> {
    let rec = RunRecord::start(out, "sample", cfg)?;
    let gen = generator(cfg)?;
    let res = gen.resolution();
    let one = |f: &Tensor<f32>| {
        let s = f.shape();
        fit_resolution(f.clone().reshape(&[1, s[0], s[1], s[2]])?, res)
    };
    let (start, end) = (one(&cond.start_frame)?, one(&cond.end_frame)?);
    let cond = ConditioningPair::new(start.outer(0)?, end.outer(0)?)?;
    let frames = gen.generate(&cond, cfg.sampler.seed)?;
    let clip = Tensor::concat_outer(&[&start, &frames, &end])?;
    debug_assert_eq!(clip.dim(0), CLIP_FRAMES);
    save_clip(&VideoClip::new(clip)?, out, &ClipMeta { resolution: res, seed: Some(cfg.sampler.seed), split: "sample".into() })?;
    log::info!("wrote {GENERATED_FRAMES} frames to {}", out.display());
    rec.finish(json!({ "out": out, "resolution": res }))
}

fn split_dirs(cfg: &RunConfig, split: &str, max: usize) -> Result<Vec<PathBuf>> {
    let mut dirs = read_manifest(&cfg.paths.data_dir.join(split).join(MANIFEST_FILE))?;
    if max > 0 {
        dirs.truncate(max);
    }
    Ok(dirs)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let rec = RunRecord::start(out, "eval", cfg)?;
    let gen = generator(cfg)?;
    let protocol: Protocol = cfg.eval.protocol.into();
    let dirs = split_dirs(cfg, &cfg.eval.split, cfg.eval.max_clips)?;
    let result = evaluate_dirs(&gen, &dirs, protocol, cfg.sampler.seed)?;
    let stem = format!("eval-{}-{}", cfg.eval.split, protocol.name());
    let mut records = Ndjson::create(&out.join(format!("{stem}.ndjson")))?;
    let by_id: std::collections::HashMap<_, _> = dirs.iter().map(|d| (d.file_name().map(|n| n.to_string_lossy().into_owned()), d)).collect();
    let mut div_all = Vec::new();
    for (i, r) in result.records.iter().enumerate() {
        let div = if cfg.eval.diversity_samples >= 2 {
            let dir = by_id[&Some(r.clip_id.clone())];
            let truth = fit_resolution(load_clip(dir)?.0.frames, gen.resolution())?;
            let d = diversity(&gen, &ConditioningPair::from_clip(&truth)?, cfg.eval.diversity_samples, crate::eval::clip_seed(cfg.sampler.seed ^ 0xd1e5, i))?;
            div_all.push(d.clone());
            Some(d)
        } else {
            None
        };
        records.write(&record_json(r, div.as_deref()))?;
    }
    let summary = summarize(&result.records, protocol, result.skipped);
    let mut s = summary_json(&summary, &cfg.eval.split);
    if !div_all.is_empty() {
        s["mean_diversity"] = json!((0..GENERATED_FRAMES).map(|f| mean(&div_all.iter().map(|d| d[f]).collect::<Vec<_>>())).collect::<Vec<_>>());
    }
    let path = out.join(format!("{stem}.summary.json"));
    fs::write(&path, serde_json::to_string_pretty(&s).expect("json")).at(&path)?;
    println!("{}", serde_json::to_string(&s).expect("json"));
    rec.finish(s)
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.paths.output_dir;
    let rec = RunRecord::start(out, "ablate", cfg)?;
    let dirs = split_dirs(cfg, &cfg.ablate.split, cfg.ablate.max_clips)?;
    let sampler = cfg.sampler.to_core();
    let (cond_model, cond_meta) = base_checkpoint(cfg, ConditioningKind::StartEnd)?;
    let (uncond_model, _) = base_checkpoint(cfg, ConditioningKind::Unconditional)?;
    let mut rows = Vec::new();
    let mut table = String::from("| model | mode | weight | PSNR (dB) | SSIM |\n|---|---|---|---|---|\n");
    let mut log = Ndjson::create(&out.join("ablation.ndjson"))?;
    let mut runs: Vec<(&str, &str, f64, &Denoiser<f32>, SamplerConfig)> = Vec::new();
    for &w in &cfg.ablate.cfg_weights {
        runs.push(("conditional", "cfg", w, &cond_model, SamplerConfig { mode: GuidanceMode::Cfg, weight: w, ..sampler }));
    }
    for &w in &cfg.ablate.recon_weights {
        runs.push(("unconditional", "recon", w, &uncond_model, SamplerConfig { mode: GuidanceMode::ReconGuidance, weight: w, ..sampler }));
    }
    for (model, mode, w, m, s) in runs {
        if mode == "cfg" {
            warn_unguided(&cond_meta, &s, "the conditional model");
        }
        let gen = Generator::Single { model: m.clone(), sampler: s };
        let result = evaluate_dirs(&gen, &dirs, Protocol::Middle, sampler.seed)?;
        let summary = summarize(&result.records, Protocol::Middle, result.skipped);
        let row = json!({ "model": model, "mode": mode, "weight": w, "clips": summary.clips, "mean_psnr": summary.mean_psnr, "mean_ssim": summary.mean_ssim });
        log::info!("{model} {mode} w={w}: PSNR {:.2} SSIM {:.4}", summary.mean_psnr, summary.mean_ssim);
        table.push_str(&format!("| {model} | {mode} | {w} | {:.2} | {:.4} |\n", summary.mean_psnr, summary.mean_ssim));
        log.write(&row)?;
        rows.push(row);
    }
    let path = out.join("ablation.md");
    fs::write(&path, &table).at(&path)?;
    print!("{table}");
    rec.finish(json!({ "rows": rows }))
}
