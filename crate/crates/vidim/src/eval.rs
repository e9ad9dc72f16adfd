//! Split evaluation, diversity probing and report records.
//!
//! Per-clip records are JSON objects with `record = "clip"`, `clip_id`,
//! `protocol`, `frames` (scored slots of the 9-frame clip), `psnr` and `ssim`
//! (one value per scored frame), `mean_psnr`, `mean_ssim`, `n_samples`, an
//! optional `diversity` array, and `fid`, `fvd`, `lpips` reserved as `null`
//! for external scorers. Infinite PSNR is written as the string `"inf"`.
//! The summary record has `record = "summary"`, `protocol`, `split`, `clips`,
//! `skipped`, `mean_psnr`, `mean_ssim` and the same reserved fields.

use std::path::PathBuf;

use rayon::prelude::*;
use serde_json::{json, Value};
use vidim_core::cascade::{cascade_sample, CascadeConfig};
use vidim_core::conditioning::ConditioningPair;
use vidim_core::denoiser::Denoiser;
use vidim_core::metrics::{diversity_score, score_clip, MetricsRecord, Protocol, Summary};
use vidim_core::rng::mix_seed;
use vidim_core::sampler::{sample_video, SamplerConfig};
use vidim_core::Tensor;

use crate::clipio::load_clip;
use crate::error::Result;
use crate::train::fit_resolution;

/// Something that turns a conditioning pair into 7 frames.
pub enum Generator {
    Single { model: Denoiser<f32>, sampler: SamplerConfig },
    Cascade { base: Denoiser<f32>, sr: Denoiser<f32>, cfg: CascadeConfig },
}

impl Generator {
    /// Resolution of the conditioning frames it consumes and of its output.
    pub fn resolution(&self) -> usize {
        match self {
            Generator::Single { model, .. } => model.config().resolution,
            Generator::Cascade { sr, .. } => sr.config().resolution,
        }
    }

    /// Sample with every stage seed derived from `seed`.
    pub fn generate(&self, cond: &ConditioningPair<f32>, seed: u64) -> Result<Tensor<f32>> {
        match self {
            Generator::Single { model, sampler } => Ok(sample_video(model, cond, None, &SamplerConfig { seed, ..*sampler })?),
            Generator::Cascade { base, sr, cfg } => {
                let cfg = CascadeConfig {
                    base_sampler: SamplerConfig { seed, ..cfg.base_sampler },
                    sr_sampler: SamplerConfig { seed: mix_seed(seed, 1), ..cfg.sr_sampler },
                    ..*cfg
                };
                Ok(cascade_sample(base, sr, cond, &cfg)?.frames)
            }
        }
    }
}

/// Seed of the clip at position `index` of a split.
pub fn clip_seed(base: u64, index: usize) -> u64 {
    mix_seed(base, index as u64)
}

/// Score one clip: condition on its first and last frame, sample once.
pub fn evaluate_clip(gen: &Generator, id: &str, clip: &Tensor<f32>, protocol: Protocol, seed: u64) -> Result<MetricsRecord> {
    let truth = fit_resolution(clip.clone(), gen.resolution())?;
    let cond = ConditioningPair::from_clip(&truth)?;
    let out = gen.generate(&cond, seed)?;
    Ok(score_clip(id, &out, &truth, protocol)?)
}

/// In-memory clips, scored in parallel; clip `i` uses `clip_seed(seed, i)`.
pub fn evaluate_clips(gen: &Generator, clips: &[(String, Tensor<f32>)], protocol: Protocol, seed: u64) -> Result<Vec<MetricsRecord>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, (id, clip))| evaluate_clip(gen, id, clip, protocol, clip_seed(seed, i)))
        .collect()
}

pub struct DirEvaluation {
    pub records: Vec<MetricsRecord>,
    pub skipped: usize,
}

/// Clip directories of a split; malformed ones are skipped with a warning.
pub fn evaluate_dirs(gen: &Generator, dirs: &[PathBuf], protocol: Protocol, seed: u64) -> Result<DirEvaluation> {
    let results: Vec<Option<MetricsRecord>> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, dir)| {
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
            match load_clip(dir) {
                Ok((clip, _)) => evaluate_clip(gen, &id, &clip.frames, protocol, clip_seed(seed, i)).map(Some),
                Err(e) => {
                    log::warn!("skipping {}: {e}", dir.display());
                    Ok(None)
                }
            }
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    Ok(DirEvaluation { records: results.into_iter().flatten().collect(), skipped })
}

/// Per generated frame diversity over `n` samples seeded from `seed`.
pub fn diversity(gen: &Generator, cond: &ConditioningPair<f32>, n: usize, seed: u64) -> Result<Vec<f64>> {
    let samples: Vec<Tensor<f32>> = (0..n).into_par_iter().map(|k| gen.generate(cond, mix_seed(seed, k as u64))).collect::<Result<_>>()?;
    Ok(diversity_score(&samples)?)
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        Value::Null
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn record_json(r: &MetricsRecord, diversity: Option<&[f64]>) -> Value {
    let mut v = json!({
        "record": "clip",
        "clip_id": r.clip_id,
        "protocol": r.protocol.name(),
        "frames": r.slots,
        "psnr": r.psnr.iter().map(|&p| number(p)).collect::<Vec<_>>(),
        "ssim": r.ssim.iter().map(|&s| number(s)).collect::<Vec<_>>(),
        "mean_psnr": number(r.mean_psnr()),
        "mean_ssim": number(r.mean_ssim()),
        "n_samples": r.n_samples,
        "fid": null,
        "fvd": null,
        "lpips": null,
    });
    if let Some(d) = diversity {
        v["diversity"] = json!(d);
    }
    v
}

pub fn summary_json(s: &Summary, split: &str) -> Value {
    json!({
        "record": "summary",
        "protocol": s.protocol.name(),
        "split": split,
        "clips": s.clips,
        "skipped": s.skipped,
        "mean_psnr": number(s.mean_psnr),
        "mean_ssim": number(s.mean_ssim),
        "fid": null,
        "fvd": null,
        "lpips": null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use vidim_core::metrics::{summarize, Protocol};

    #[test]
    fn infinite_psnr_is_rendered_as_a_string() {
        let r = MetricsRecord {
            clip_id: "c".into(),
            protocol: Protocol::Middle,
            slots: vec![4],
            psnr: vec![f64::INFINITY],
            ssim: vec![1.0],
            n_samples: 1,
        };
        let v = record_json(&r, None);
        assert_eq!(v["psnr"][0], "inf");
        assert_eq!(v["mean_psnr"], "inf");
        assert_eq!(v["frames"][0], 4);
        assert!(v["fid"].is_null());
        let s = summary_json(&summarize(&[r], Protocol::Middle, 2), "linear");
        assert_eq!(s["skipped"], 2);
        assert_eq!(s["mean_psnr"], "inf");
    }
}
