//! safetensors checkpoints.
//!
//! Tensors are little-endian f32, row-major, named `params.<name>`,
//! `ema.<name>`, `adam_m.<name>` and `adam_v.<name>`. The header metadata
//! carries `format`, `step`, `stage`, `config_hash`, `ema` (whether an EMA
//! shadow is stored), `cfg_drop_prob`, `model` (JSON model spec) and `rng`
//! (JSON generator cursor).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use vidim_core::denoiser::{Denoiser, ModelConfig};
use vidim_core::nn::ParamStore;
use vidim_core::training::{RngCursor, Stage, TrainState};
use vidim_core::Tensor;

use crate::config::{content_hash, ModelSpec};
use crate::error::{IoContext, Result, VidimError};

pub const FORMAT: &str = "vidim-checkpoint-1";
const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub stage: Stage,
    pub config_hash: String,
    pub has_ema: bool,
    pub cfg_drop_prob: f64,
    pub model: ModelSpec,
    pub rng: Option<RngCursor>,
}

#[derive(Serialize, Deserialize)]
struct CursorJson {
    seed: String,
    stream: u64,
    word_pos: String,
}

fn cursor_json(c: &RngCursor) -> String {
    let seed = c.seed.iter().map(|b| format!("{b:02x}")).collect();
    serde_json::to_string(&CursorJson { seed, stream: c.stream, word_pos: c.word_pos.to_string() }).expect("json")
}

fn parse_cursor(s: &str) -> Result<RngCursor> {
    let bad = || VidimError::Format(format!("bad rng cursor {s:?}"));
    let j: CursorJson = serde_json::from_str(s).map_err(|_| bad())?;
    if j.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&j.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(RngCursor { seed, stream: j.stream, word_pos: j.word_pos.parse().map_err(|_| bad())? })
}

/// Hash binding a checkpoint to its model layout and training settings.
pub fn config_hash(model: &ModelSpec, stage: Stage, cfg_drop_prob: f64) -> String {
    content_hash(&(model, stage.name(), cfg_drop_prob))
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write atomically (temporary file then rename).
pub fn save_state(path: &Path, state: &TrainState<f32>, stage: Stage, cfg_drop_prob: f64) -> Result<()> {
    let spec = ModelSpec::from(state.model.config());
    let stores: [&ParamStore<f32>; 4] = [state.model.params(), &state.ema, &state.adam_m, &state.adam_v];
    let mut buffers = Vec::new();
    for (group, store) in GROUPS.iter().zip(stores) {
        for (name, t) in store.iter() {
            buffers.push((format!("{group}.{name}"), t.shape().to_vec(), to_bytes(t)));
        }
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| VidimError::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("step".into(), state.step.to_string());
    meta.insert("stage".into(), stage.name().into());
    meta.insert("config_hash".into(), config_hash(&spec, stage, cfg_drop_prob));
    meta.insert("ema".into(), "true".into());
    meta.insert("cfg_drop_prob".into(), cfg_drop_prob.to_string());
    meta.insert("model".into(), serde_json::to_string(&spec).expect("json"));
    meta.insert("rng".into(), cursor_json(&RngCursor::capture(&state.rng)));
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| VidimError::Format(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(VidimError::Path(format!("checkpoint {} does not exist", path.display())));
    }
    fs::read(path).at(path)
}

fn parse_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let fmt = |m: &str| VidimError::Format(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| fmt(&e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| fmt("missing metadata"))?;
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| fmt(&format!("missing metadata key {k:?}")));
    if get("format")? != FORMAT {
        return Err(fmt("not a vidim checkpoint"));
    }
    let stage = match get("stage")?.as_str() {
        "base" => Stage::Base,
        "sr" => Stage::Sr,
        other => return Err(fmt(&format!("unknown stage {other:?}"))),
    };
    let model: ModelSpec = serde_json::from_str(&get("model")?).map_err(|e| fmt(&e.to_string()))?;
    Ok(CheckpointMeta {
        step: get("step")?.parse().map_err(|_| fmt("bad step"))?,
        stage,
        config_hash: get("config_hash")?,
        has_ema: get("ema")? == "true",
        cfg_drop_prob: get("cfg_drop_prob")?.parse().map_err(|_| fmt("bad cfg_drop_prob"))?,
        model,
        rng: meta.get("rng").map(|s| parse_cursor(s)).transpose()?,
    })
}

fn load_group(st: &SafeTensors<'_>, template: &ParamStore<f32>, group: &str, path: &Path) -> Result<ParamStore<f32>> {
    let mut store = template.clone();
    let names: Vec<String> = template.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("{group}.{name}");
        let view = st
            .tensor(&key)
            .map_err(|_| VidimError::Format(format!("{}: missing tensor {key}", path.display())))?;
        if view.dtype() != Dtype::F32 {
            return Err(VidimError::Format(format!("{}: {key} is {:?}, expected F32", path.display(), view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store
            .set_by_name(&name, Tensor::from_vec(view.shape(), data)?)
            .map_err(|e| VidimError::Format(format!("{}: {key}: {e}", path.display())))?;
    }
    Ok(store)
}

fn model_of(meta: &CheckpointMeta) -> Result<Denoiser<f32>> {
    Ok(Denoiser::new(ModelConfig::from(&meta.model), 0)?)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    parse_meta(&read(path)?, path)
}

/// Restore a full training state for resuming.
pub fn load_state(path: &Path) -> Result<(TrainState<f32>, CheckpointMeta)> {
    let bytes = read(path)?;
    let meta = parse_meta(&bytes, path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| VidimError::Format(e.to_string()))?;
    let fresh = model_of(&meta)?;
    let template = fresh.params();
    let params = load_group(&st, template, "params", path)?;
    let ema = load_group(&st, template, "ema", path)?;
    let adam_m = load_group(&st, template, "adam_m", path)?;
    let adam_v = load_group(&st, template, "adam_v", path)?;
    let rng = meta
        .rng
        .ok_or_else(|| VidimError::Format(format!("{}: no rng cursor, cannot resume", path.display())))?
        .restore();
    let state = TrainState { model: fresh.with_params(params)?, ema, adam_m, adam_v, step: meta.step, rng };
    Ok((state, meta))
}

/// The model with its EMA weights (raw weights if no shadow is stored).
pub fn load_sampling_model(path: &Path) -> Result<(Denoiser<f32>, CheckpointMeta)> {
    let bytes = read(path)?;
    let meta = parse_meta(&bytes, path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| VidimError::Format(e.to_string()))?;
    let fresh = model_of(&meta)?;
    let group = if meta.has_ema { "ema" } else { "params" };
    let params = load_group(&st, fresh.params(), group, path)?;
    Ok((fresh.with_params(params)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidim_core::rng::stream;
    use vidim_core::training::{synthetic_batch, train_step, TrainConfig};

    #[test]
    fn state_round_trip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut config = ModelConfig::toy_base();
        config.resolution = 16;
        config.levels.truncate(2);
        config.levels[0].size = 16;
        config.levels[1].size = 8;
        config.levels[1].spatial_attention = true;
        let cfg = TrainConfig { batch_size: 1, warmup_steps: 1, ..TrainConfig::default() };
        let mut a = TrainState::new(Denoiser::<f32>::new(config, 3).unwrap(), 3);
        train_step(&mut a, &cfg, &synthetic_batch(1, 10, 0, 1, 16).unwrap()).unwrap();
        save_state(&path, &a, Stage::Base, 0.1).unwrap();
        let (mut b, meta) = load_state(&path).unwrap();
        assert_eq!(meta.step, 1);
        assert_eq!(meta.cfg_drop_prob, 0.1);
        assert_eq!(b.model.params(), a.model.params());
        assert_eq!(b.adam_v, a.adam_v);
        let batch = synthetic_batch(1, 10, 1, 1, 16).unwrap();
        assert_eq!(train_step(&mut a, &cfg, &batch).unwrap(), train_step(&mut b, &cfg, &batch).unwrap());
        assert_eq!(a.ema, b.ema);
        let (m, _) = load_sampling_model(&path).unwrap();
        assert_ne!(m.params(), b.model.params());
        let _ = stream(0, 0);
    }

    #[test]
    fn missing_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_meta(&dir.path().join("nope.safetensors")), Err(VidimError::Path(_))));
        let bogus = dir.path().join("x.safetensors");
        fs::write(&bogus, b"not a checkpoint").unwrap();
        assert!(matches!(read_meta(&bogus), Err(VidimError::Format(_))));
    }
}
