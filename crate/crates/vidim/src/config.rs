//! Run configuration: a TOML file with nested sections, `section.key=value`
//! overrides on top, unknown keys rejected. The resolved merge is frozen
//! next to every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidim_core::denoiser::{FrameConditioning, LevelConfig, ModelConfig, Variant};
use vidim_core::metrics::Protocol;
use vidim_core::sampler::{GuidanceMode, SamplerConfig};
use vidim_core::training::{Stage, TrainConfig};

use crate::error::{IoContext, Result, VidimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    StartEnd,
    Unconditional,
}

impl From<ConditioningKind> for FrameConditioning {
    fn from(k: ConditioningKind) -> Self {
        match k {
            ConditioningKind::StartEnd => FrameConditioning::StartEnd,
            ConditioningKind::Unconditional => FrameConditioning::Unconditional,
        }
    }
}

impl From<FrameConditioning> for ConditioningKind {
    fn from(c: FrameConditioning) -> Self {
        match c {
            FrameConditioning::StartEnd => ConditioningKind::StartEnd,
            FrameConditioning::Unconditional => ConditioningKind::Unconditional,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Base,
    Sr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub size: usize,
    pub channels: usize,
    pub subblocks: usize,
    pub heads: usize,
    pub spatial_attention: bool,
}

/// Serializable mirror of the core model configuration; stored in every
/// checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: VariantKind,
    pub conditioning: ConditioningKind,
    pub resolution: usize,
    pub image_channels: usize,
    pub levels: Vec<LevelSpec>,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub norm_groups: usize,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
}

impl From<&ModelConfig> for ModelSpec {
    fn from(c: &ModelConfig) -> Self {
        Self {
            variant: match c.variant {
                Variant::Base => VariantKind::Base,
                Variant::SuperResolution => VariantKind::Sr,
            },
            conditioning: c.conditioning.into(),
            resolution: c.resolution,
            image_channels: c.image_channels,
            levels: c
                .levels
                .iter()
                .map(|l| LevelSpec {
                    size: l.size,
                    channels: l.channels,
                    subblocks: l.subblocks,
                    heads: l.heads,
                    spatial_attention: l.spatial_attention,
                })
                .collect(),
            embed_dim: c.embed_dim,
            cond_dim: c.cond_dim,
            norm_groups: c.norm_groups,
            mlp_ratio: c.mlp_ratio,
            dropout_rate: c.dropout_rate,
        }
    }
}

impl From<&ModelSpec> for ModelConfig {
    fn from(s: &ModelSpec) -> Self {
        Self {
            variant: match s.variant {
                VariantKind::Base => Variant::Base,
                VariantKind::Sr => Variant::SuperResolution,
            },
            conditioning: s.conditioning.into(),
            resolution: s.resolution,
            image_channels: s.image_channels,
            levels: s
                .levels
                .iter()
                .map(|l| LevelConfig {
                    size: l.size,
                    channels: l.channels,
                    subblocks: l.subblocks,
                    heads: l.heads,
                    spatial_attention: l.spatial_attention,
                })
                .collect(),
            embed_dim: s.embed_dim,
            cond_dim: s.cond_dim,
            norm_groups: s.norm_groups,
            mlp_ratio: s.mlp_ratio,
            dropout_rate: s.dropout_rate,
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(match name {
        "desk_base" => ModelConfig::desk_base(),
        "desk_sr" => ModelConfig::desk_sr(),
        "toy_base" => ModelConfig::toy_base(),
        "toy_sr" => ModelConfig::toy_sr(),
        other => return Err(VidimError::Config(format!("unknown model preset {other:?}"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), output_dir: "runs".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Clip directories under `data_dir/train`.
    Disk,
    /// Clips generated on the fly from the seed; same content as `make-data`.
    Stream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Resolution clips are generated at; the base stage trains on
    /// area-downsampled copies when it runs at half this size.
    pub resolution: usize,
    pub source: DataSource,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_clips: 50_000, eval_clips: 400, resolution: 64, source: DataSource::Disk }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_preset: String,
    pub sr_preset: String,
    pub base_conditioning: ConditioningKind,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { base_preset: "desk_base".into(), sr_preset: "desk_sr".into(), base_conditioning: ConditioningKind::StartEnd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub cfg_drop_prob: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl TrainSection {
    fn with(batch_size: usize, total_steps: u64) -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            warmup_steps: d.warmup_steps,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            grad_clip_norm: d.grad_clip_norm,
            ema_decay: d.ema_decay,
            batch_size,
            total_steps,
            cfg_drop_prob: d.cfg_drop_prob,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }

    pub fn to_core(&self, stage: Stage, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip_norm: self.grad_clip_norm,
            ema_decay: self.ema_decay,
            batch_size: self.batch_size,
            total_steps: self.total_steps,
            cfg_drop_prob: self.cfg_drop_prob,
            stage,
            seed,
        }
    }
}

fn default_base_train() -> TrainSection {
    TrainSection::with(8, 20_000)
}

fn default_sr_train() -> TrainSection {
    TrainSection::with(4, 10_000)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Cfg,
    Imputation,
    Recon,
}

impl From<ModeKind> for GuidanceMode {
    fn from(m: ModeKind) -> Self {
        match m {
            ModeKind::Cfg => GuidanceMode::Cfg,
            ModeKind::Imputation => GuidanceMode::Imputation,
            ModeKind::Recon => GuidanceMode::ReconGuidance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub mode: ModeKind,
    pub weight: f64,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self { steps: d.steps, mode: ModeKind::Cfg, weight: d.weight, seed: d.seed }
    }
}

impl SamplerSection {
    pub fn to_core(&self) -> SamplerConfig {
        SamplerConfig { steps: self.steps, mode: self.mode.into(), weight: self.weight, seed: self.seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSection {
    /// Run the SR stage after the base stage in `sample` and `eval`.
    pub enabled: bool,
    pub sr_aug_level: f64,
    pub sr_steps: usize,
    pub sr_weight: f64,
}

impl Default for CascadeSection {
    fn default() -> Self {
        Self {
            enabled: false,
            sr_aug_level: vidim_core::cascade::DEFAULT_SR_AUG_LEVEL,
            sr_steps: vidim_core::sampler::DEFAULT_STEPS,
            sr_weight: vidim_core::sampler::DEFAULT_GUIDANCE_WEIGHT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Middle,
    All7,
}

impl From<ProtocolKind> for Protocol {
    fn from(p: ProtocolKind) -> Self {
        match p {
            ProtocolKind::Middle => Protocol::Middle,
            ProtocolKind::All7 => Protocol::All7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub split: String,
    pub protocol: ProtocolKind,
    /// Evaluate only the first `max_clips` clips; 0 means all.
    pub max_clips: usize,
    /// When at least 2, also report per-frame diversity over this many samples.
    pub diversity_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "linear".into(), protocol: ProtocolKind::Middle, max_clips: 0, diversity_samples: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub recon_weights: Vec<f64>,
    pub cfg_weights: Vec<f64>,
    pub split: String,
    pub max_clips: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            recon_weights: vec![1.0, 3.0, 7.0, 14.0, 27.0],
            cfg_weights: vec![0.0, 1.0, 2.0, 4.0],
            split: "linear".into(),
            max_clips: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataSection,
    pub model: ModelSection,
    pub train_base: TrainSection,
    pub train_sr: TrainSection,
    pub sampler: SamplerSection,
    pub cascade: CascadeSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train_base: default_base_train(),
            train_sr: default_sr_train(),
            sampler: SamplerSection::default(),
            cascade: CascadeSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Overlay `top` on `base`, recursing into sections. Keys absent from `base`
/// are kept so deserialization can reject them.
fn deep_merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| VidimError::Usage(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(VidimError::Usage(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| VidimError::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// File (if any), then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| VidimError::Path(format!("{}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| VidimError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        deep_merge(&mut merged, table);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| VidimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        preset(&self.model.base_preset)?;
        preset(&self.model.sr_preset)?;
        self.train_base.to_core(Stage::Base, self.seed).validate()?;
        self.train_sr.to_core(Stage::Sr, self.seed).validate()?;
        self.sampler.to_core().validate()?;
        if !(0.0..=vidim_core::conditioning::MAX_AUG_LEVEL).contains(&self.cascade.sr_aug_level) {
            return Err(VidimError::Config(format!("cascade.sr_aug_level {} outside [0, 0.5]", self.cascade.sr_aug_level)));
        }
        if self.data.resolution == 0 {
            return Err(VidimError::Config("data.resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn base_model(&self) -> Result<ModelConfig> {
        let mut m = preset(&self.model.base_preset)?;
        m.conditioning = self.model.base_conditioning.into();
        Ok(m)
    }

    pub fn sr_model(&self) -> Result<ModelConfig> {
        preset(&self.model.sr_preset)
    }

    /// `base.safetensors`, `base_uncond.safetensors` or `sr.safetensors`.
    pub fn checkpoint_path(&self, stage: Stage, conditioning: ConditioningKind) -> PathBuf {
        let name = match (stage, conditioning) {
            (Stage::Sr, _) => "sr",
            (Stage::Base, ConditioningKind::StartEnd) => "base",
            (Stage::Base, ConditioningKind::Unconditional) => "base_uncond",
        };
        self.paths.checkpoint_dir.join(format!("{name}.safetensors"))
    }
}

/// Short hex digest of a serializable value.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("hashable value serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes `<command>.config.toml` at the start of a run and
/// `<command>.meta.json` when it finishes.
pub struct RunRecord {
    dir: PathBuf,
    command: String,
    seed: u64,
    config_hash: String,
    started: f64,
}

impl RunRecord {
    pub fn start(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(format!("{command}.config.toml"));
        fs::write(&path, cfg.to_toml()).at(&path)?;
        Ok(Self { dir: dir.to_path_buf(), command: command.into(), seed: cfg.seed, config_hash: content_hash(cfg), started: unix_now() })
    }

    pub fn finish(self, extra: serde_json::Value) -> Result<()> {
        let finished = unix_now();
        let meta = serde_json::json!({
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "git_revision": git_revision(),
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": self.started,
            "finished_unix": finished,
            "wall_seconds": finished - self.started,
            "result": extra,
        });
        let path = self.dir.join(format!("{}.meta.json", self.command));
        fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).at(&path)
    }
}
