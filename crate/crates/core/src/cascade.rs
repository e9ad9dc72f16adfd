//! Base then super-resolution sampling.

use alloc::format;

use crate::conditioning::{noise_augment_at, ConditioningPair, MAX_AUG_LEVEL};
use crate::denoiser::{Denoiser, SrConditioning, Variant, SR_FACTOR};
use crate::error::{Error, Result};
use crate::resample::area_downsample;
use crate::rng::stream;
use crate::sampler::{sample_video, SamplerConfig};
use crate::tensor::{Scalar, Tensor};

/// Augmentation level applied to the base output at sampling time.
pub const DEFAULT_SR_AUG_LEVEL: f64 = 0.1;
const AUG_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    pub base_sampler: SamplerConfig,
    pub sr_sampler: SamplerConfig,
    pub sr_aug_level: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            base_sampler: SamplerConfig::default(),
            sr_sampler: SamplerConfig { seed: 1, ..SamplerConfig::default() },
            sr_aug_level: DEFAULT_SR_AUG_LEVEL,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.base_sampler.validate()?;
        self.sr_sampler.validate()?;
        if !(0.0..=MAX_AUG_LEVEL).contains(&self.sr_aug_level) {
            return Err(Error::Config(format!("sr_aug_level {} outside [0, {MAX_AUG_LEVEL}]", self.sr_aug_level)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeOutput<T> {
    /// The 7 low-resolution base frames.
    pub base: Tensor<T>,
    /// What the SR stage was conditioned on.
    pub sr_conditioning: SrConditioning<T>,
    /// The 7 high-resolution frames.
    pub frames: Tensor<T>,
}

/// Downsample `cond_hi` for the base model, sample 7 frames, augment them at
/// `sr_aug_level` and upsample with the SR model.
pub fn cascade_sample<T: Scalar>(
    base: &Denoiser<T>,
    sr: &Denoiser<T>,
    cond_hi: &ConditioningPair<T>,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput<T>> {
    cfg.validate()?;
    let (bc, sc) = (base.config(), sr.config());
    if bc.variant != Variant::Base || sc.variant != Variant::SuperResolution {
        return Err(Error::Config("cascade needs a base model and a super-resolution model".into()));
    }
    if bc.resolution * SR_FACTOR != sc.resolution || bc.image_channels != sc.image_channels {
        return Err(Error::Config(format!(
            "base output {} px does not feed a {} px super-resolution stage",
            bc.resolution, sc.resolution
        )));
    }
    if cond_hi.frame_shape() != [sc.image_channels, sc.resolution, sc.resolution] {
        return Err(Error::Config(format!(
            "conditioning frames {:?} do not match the {} px super-resolution stage",
            cond_hi.frame_shape(),
            sc.resolution
        )));
    }
    let factor = SR_FACTOR as f64;
    let cond_lo = ConditioningPair::new(
        area_downsample(&cond_hi.start_frame, factor)?,
        area_downsample(&cond_hi.end_frame, factor)?,
    )?;
    let base_frames = sample_video(base, &cond_lo, None, &cfg.base_sampler)?;
    let mut rng = stream(cfg.sr_sampler.seed, AUG_STREAM);
    let low_res = noise_augment_at(&base_frames, cfg.sr_aug_level, &mut rng, sr.schedule())?;
    let sr_conditioning = SrConditioning { low_res, aug_level: cfg.sr_aug_level };
    let frames = sample_video(sr, cond_hi, Some(&sr_conditioning), &cfg.sr_sampler)?;
    Ok(CascadeOutput { base: base_frames, sr_conditioning, frames })
}
