//! Frame conditioning: the 9-frame model input, null conditioning for
//! classifier-free guidance, per-frame embeddings and noise conditioning
//! augmentation for the super-resolution stage.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffusion::{forward_at, LogSnrSchedule};
use crate::error::{shape_err, Error, Result};
use crate::rng::{gaussian, uniform};
use crate::tensor::{Scalar, Tensor};

/// Frames per clip: start, seven generated frames, end.
pub const CLIP_FRAMES: usize = 9;
pub const GENERATED_FRAMES: usize = 7;
/// Upper end of the training distribution of the augmentation level.
pub const MAX_AUG_LEVEL: f64 = 0.5;
/// Timestamps are encoded at `TIMESTAMP_POSITION_SCALE * t`.
pub const TIMESTAMP_POSITION_SCALE: f64 = 1000.0;
/// Log-SNR values are encoded at `lambda / LOG_SNR_POSITION_DIVISOR`.
pub const LOG_SNR_POSITION_DIVISOR: f64 = 4.0;

/// Normalized timestamp of clip slot `i` (`0..=8`).
pub fn slot_timestamp(i: usize) -> f64 {
    i as f64 / (CLIP_FRAMES - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Timestamp {
    At(f64),
    /// The learned null token of the unconditional branch.
    Null,
}

/// Start and end frames (`[C, H, W]` each). When `dropped`, the content is
/// unit Gaussian noise standing in for absent conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningPair<T> {
    pub start_frame: Tensor<T>,
    pub end_frame: Tensor<T>,
    pub dropped: bool,
}

impl<T: Scalar> ConditioningPair<T> {
    pub fn new(start_frame: Tensor<T>, end_frame: Tensor<T>) -> Result<Self> {
        if start_frame.shape().len() != 3 {
            return Err(shape_err!("conditioning frames must be [C, H, W], got {:?}", start_frame.shape()));
        }
        start_frame.ensure_same_shape(&end_frame, "start vs end frame")?;
        Ok(Self { start_frame, end_frame, dropped: false })
    }

    /// Start and end slots of a 9-frame clip `[9, C, H, W]`.
    pub fn from_clip(clip: &Tensor<T>) -> Result<Self> {
        if clip.shape().first() != Some(&CLIP_FRAMES) {
            return Err(shape_err!("expected a {}-frame clip, got {:?}", CLIP_FRAMES, clip.shape()));
        }
        Self::new(clip.outer(0)?, clip.outer(CLIP_FRAMES - 1)?)
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.start_frame.shape()
    }

    /// Log-SNR marker carried by the conditioning slots.
    pub fn log_snr_marker(&self, schedule: &LogSnrSchedule) -> f64 {
        if self.dropped {
            schedule.lambda_min
        } else {
            schedule.lambda_max
        }
    }

    pub fn timestamps(&self) -> (Timestamp, Timestamp) {
        if self.dropped {
            (Timestamp::Null, Timestamp::Null)
        } else {
            (Timestamp::At(0.0), Timestamp::At(1.0))
        }
    }
}

/// Replace both conditioning frames with unit Gaussian noise. The pair is
/// dropped jointly, never one-sided.
pub fn drop_conditioning<T: Scalar, R: Rng + ?Sized>(cond: &ConditioningPair<T>, rng: &mut R) -> Result<ConditioningPair<T>> {
    if cond.dropped {
        return Err(Error::State("conditioning pair is already dropped".into()));
    }
    let shape = cond.frame_shape().to_vec();
    Ok(ConditioningPair { start_frame: gaussian(rng, &shape), end_frame: gaussian(rng, &shape), dropped: true })
}

/// Drop with probability `p` (one Bernoulli draw, then the noise content).
pub fn maybe_drop<T: Scalar, R: Rng + ?Sized>(cond: &ConditioningPair<T>, p: f64, rng: &mut R) -> Result<ConditioningPair<T>> {
    if rng.random::<f64>() < p {
        drop_conditioning(cond, rng)
    } else {
        Ok(cond.clone())
    }
}

/// Everything the denoiser consumes for one clip: a frame stack with the
/// per-frame log-SNR and timestamp of every slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub frames: Tensor<T>,
    pub per_frame_log_snr: Vec<f64>,
    pub timestamps: Vec<Timestamp>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

/// `[start, f1..f7, end]` with conditioning at the maximum log-SNR (or the
/// minimum when dropped) and the noisy frames at `lambda(t)`.
pub fn assemble_input<T: Scalar>(
    cond: &ConditioningPair<T>,
    noisy: &Tensor<T>,
    t: f64,
    schedule: &LogSnrSchedule,
) -> Result<ModelInput<T>> {
    let s = noisy.shape();
    if s.len() != 4 || s[0] != GENERATED_FRAMES || s[1..] != cond.frame_shape()[..] {
        return Err(shape_err!(
            "noisy frames {:?} do not match {} frames of {:?}",
            s,
            GENERATED_FRAMES,
            cond.frame_shape()
        ));
    }
    let lambda = schedule.log_snr(t)?;
    let frame_shape = cond.frame_shape();
    let start = cond.start_frame.clone().reshape(&[1, frame_shape[0], frame_shape[1], frame_shape[2]])?;
    let end = cond.end_frame.clone().reshape(&[1, frame_shape[0], frame_shape[1], frame_shape[2]])?;
    let frames = Tensor::concat_outer(&[&start, noisy, &end])?;
    let marker = cond.log_snr_marker(schedule);
    let mut per_frame_log_snr = alloc::vec![lambda; CLIP_FRAMES];
    per_frame_log_snr[0] = marker;
    per_frame_log_snr[CLIP_FRAMES - 1] = marker;
    let (ts, te) = cond.timestamps();
    let mut timestamps: Vec<Timestamp> = (0..CLIP_FRAMES).map(|i| Timestamp::At(slot_timestamp(i))).collect();
    timestamps[0] = ts;
    timestamps[CLIP_FRAMES - 1] = te;
    Ok(ModelInput { frames, per_frame_log_snr, timestamps })
}

/// Input of the unconditional 9-frame model: every slot noisy at `lambda(t)`.
pub fn assemble_unconditional<T: Scalar>(noisy: &Tensor<T>, t: f64, schedule: &LogSnrSchedule) -> Result<ModelInput<T>> {
    if noisy.shape().len() != 4 || noisy.dim(0) != CLIP_FRAMES {
        return Err(shape_err!("expected {} noisy frames, got {:?}", CLIP_FRAMES, noisy.shape()));
    }
    let lambda = schedule.log_snr(t)?;
    Ok(ModelInput {
        frames: noisy.clone(),
        per_frame_log_snr: alloc::vec![lambda; CLIP_FRAMES],
        timestamps: (0..CLIP_FRAMES).map(|i| Timestamp::At(slot_timestamp(i))).collect(),
    })
}

/// `[sin(p f_0) .. sin(p f_{d/2-1}), cos(p f_0) .. cos(p f_{d/2-1})]` with
/// `f_i = 10000^{-i/(d/2)}`.
pub fn sinusoidal(position: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out[i] = libm::sin(position * freq);
        out[half + i] = libm::cos(position * freq);
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding width must be even and positive, got {dim}")));
    }
    Ok(())
}

/// Fixed (parameter-free) part of the frame embedding: sinusoid of `lambda/4`
/// plus sinusoid of the timestamp, the latter omitted for null-token frames.
/// Returns `[frames, dim]` and the null-token mask.
pub fn frame_embedding_fixed(log_snr: &[f64], timestamps: &[Timestamp], dim: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    check_dim(dim)?;
    if log_snr.len() != timestamps.len() {
        return Err(shape_err!("{} log-SNR values vs {} timestamps", log_snr.len(), timestamps.len()));
    }
    let mut out = alloc::vec![0.0; log_snr.len() * dim];
    let mut tmp = alloc::vec![0.0; dim];
    let mut mask = Vec::with_capacity(log_snr.len());
    for (i, (&l, ts)) in log_snr.iter().zip(timestamps).enumerate() {
        let row = &mut out[i * dim..(i + 1) * dim];
        sinusoidal(l / LOG_SNR_POSITION_DIVISOR, dim, row);
        match ts {
            Timestamp::At(t) => {
                sinusoidal(t * TIMESTAMP_POSITION_SCALE, dim, &mut tmp);
                for (r, v) in row.iter_mut().zip(&tmp) {
                    *r += v;
                }
                mask.push(false);
            }
            Timestamp::Null => mask.push(true),
        }
    }
    Ok((out, mask))
}

/// Per-frame embedding: sinusoid of the log-SNR plus the timestamp sinusoid,
/// or plus the learned `null_token` for null-token frames.
pub fn frame_embedding<T: Scalar>(log_snr: &[f64], timestamps: &[Timestamp], dim: usize, null_token: &[T]) -> Result<Tensor<T>> {
    if null_token.len() != dim {
        return Err(shape_err!("null token width {} vs embedding width {}", null_token.len(), dim));
    }
    let (fixed, mask) = frame_embedding_fixed(log_snr, timestamps, dim)?;
    let n = log_snr.len();
    Tensor::from_vec(
        &[n, dim],
        (0..n * dim)
            .map(|k| {
                let extra = if mask[k / dim] { null_token[k % dim].as_f64() } else { 0.0 };
                T::from_f64_lossy(fixed[k] + extra)
            })
            .collect(),
    )
}

/// Noise conditioning augmentation at a fixed level. Level 0 is exactly the
/// identity.
pub fn noise_augment_at<T: Scalar, R: Rng + ?Sized>(
    low_res: &Tensor<T>,
    t_aug: f64,
    rng: &mut R,
    schedule: &LogSnrSchedule,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t_aug) {
        return Err(Error::Domain(format!("augmentation level {t_aug} outside [0, 1]")));
    }
    if t_aug == 0.0 {
        return Ok(low_res.clone());
    }
    let noise = gaussian(rng, low_res.shape());
    Ok(forward_at(low_res, schedule.log_snr(t_aug)?, &noise)?.z)
}

/// Draw `t_aug ~ U(0, 0.5)` and noise the low-resolution frames to that level.
pub fn noise_augment<T: Scalar, R: Rng + ?Sized>(
    low_res: &Tensor<T>,
    rng: &mut R,
    schedule: &LogSnrSchedule,
) -> Result<(Tensor<T>, f64)> {
    let t_aug = uniform(rng, 0.0, MAX_AUG_LEVEL);
    Ok((noise_augment_at(low_res, t_aug, rng, schedule)?, t_aug))
}
