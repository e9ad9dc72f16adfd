//! Ancestral sampling loops: classifier-free guidance for the frame-conditioned
//! model, and imputation / reconstruction guidance for the unconditional
//! 9-frame baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{
    assemble_input, assemble_unconditional, drop_conditioning, ConditioningPair, ModelInput, CLIP_FRAMES,
    GENERATED_FRAMES,
};
use crate::denoiser::{Denoiser, FrameConditioning, SrConditioning};
use crate::diffusion::{alpha_sigma, ancestral_step, time_grid, x_from_v, LogSnrSchedule};
use crate::error::{shape_err, Error, Result};
use crate::rng::{gaussian, stream};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_STEPS: usize = 256;
pub const DEFAULT_GUIDANCE_WEIGHT: f64 = 2.0;

/// Stream of the initial latent and the per-step noise.
pub const NOISE_STREAM: u64 = 0;
/// Stream of the null-conditioning noise frames.
pub const NULL_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    Cfg,
    Imputation,
    ReconGuidance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub mode: GuidanceMode,
    /// CFG weight (w=1 is purely conditional) or reconstruction-guidance
    /// weight (w=1 is plain imputation). Ignored for imputation.
    pub weight: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, mode: GuidanceMode::Cfg, weight: DEFAULT_GUIDANCE_WEIGHT, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        let w = self.weight;
        match self.mode {
            GuidanceMode::Cfg if !(w.is_finite() && w >= 0.0) => {
                Err(Error::Domain(format!("CFG weight must be >= 0, got {w}")))
            }
            GuidanceMode::ReconGuidance if !(w.is_finite() && w >= 1.0) => {
                Err(Error::Domain(format!("reconstruction guidance weight must be >= 1, got {w}")))
            }
            _ => Ok(()),
        }
    }
}

/// Anything that predicts v for assembled model inputs. Implemented by the
/// trained network and by closed-form denoisers used as test oracles.
pub trait VideoDenoiser<T: Scalar> {
    fn frame_conditioning(&self) -> FrameConditioning;

    fn schedule(&self) -> LogSnrSchedule {
        LogSnrSchedule::default()
    }

    /// One v-prediction per input; all inputs share `sr`.
    fn predict(&self, inputs: &[ModelInput<T>], sr: Option<&SrConditioning<T>>) -> Result<Vec<Tensor<T>>>;

    /// v-prediction and `J^T u` with respect to the input frames, where
    /// `u = upstream(v)`.
    fn predict_with_input_vjp(
        &self,
        input: &ModelInput<T>,
        sr: Option<&SrConditioning<T>>,
        upstream: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)>;
}

impl<T: Scalar> VideoDenoiser<T> for Denoiser<T> {
    fn frame_conditioning(&self) -> FrameConditioning {
        self.config().conditioning
    }

    fn schedule(&self) -> LogSnrSchedule {
        *Denoiser::schedule(self)
    }

    fn predict(&self, inputs: &[ModelInput<T>], sr: Option<&SrConditioning<T>>) -> Result<Vec<Tensor<T>>> {
        let batch = self.make_batch(inputs, &vec![sr.cloned(); inputs.len()])?;
        let v = self.predict_batch(&batch)?;
        let per = v.dim(0) / inputs.len();
        (0..inputs.len()).map(|i| v.slice_outer(i * per, per)).collect()
    }

    fn predict_with_input_vjp(
        &self,
        input: &ModelInput<T>,
        sr: Option<&SrConditioning<T>>,
        upstream: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        Denoiser::predict_with_input_vjp(self, input, sr, upstream)
    }
}

/// `v_uncond + w (v_cond - v_uncond)`; w=1 and w=0 return the respective
/// branch untouched.
pub fn cfg_combine<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    v_cond.ensure_same_shape(v_uncond, "cfg_combine")?;
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    let w = T::from_f64_lossy(w);
    v_cond.zip_map(v_uncond, |c, u| u + w * (c - u))
}

fn reshape_frame<T: Scalar>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(frame.shape());
    frame.clone().reshape(&shape)
}

/// Overwrite slots 0 and 8 of a 9-frame clean estimate with the conditioning
/// frames.
pub fn impute_replace<T: Scalar>(x_hat: &Tensor<T>, cond: &ConditioningPair<T>) -> Result<Tensor<T>> {
    if x_hat.shape().first() != Some(&CLIP_FRAMES) {
        return Err(Error::Mode(format!(
            "imputation needs a {CLIP_FRAMES}-frame estimate, got {:?}",
            x_hat.shape()
        )));
    }
    if x_hat.shape()[1..] != *cond.frame_shape() {
        return Err(shape_err!("estimate frames {:?} vs conditioning {:?}", &x_hat.shape()[1..], cond.frame_shape()));
    }
    let mut out = x_hat.clone();
    out.set_outer(0, &reshape_frame(&cond.start_frame)?.outer(0)?)?;
    out.set_outer(CLIP_FRAMES - 1, &reshape_frame(&cond.end_frame)?.outer(0)?)?;
    Ok(out)
}

/// Gradient of `||c - c_hat||^2` with respect to the noisy 9-frame input,
/// where `c_hat` are slots 0 and 8 of `alpha z - sigma v(z)`. Also returns
/// the v-prediction of that forward pass.
pub fn recon_gradient<T: Scalar, D: VideoDenoiser<T> + ?Sized>(
    model: &D,
    input: &ModelInput<T>,
    cond: &ConditioningPair<T>,
    lambda: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let z = &input.frames;
    let mut r = Tensor::zeros(z.shape());
    // residual r = c - c_hat on the conditioning slots, zero elsewhere
    let (v, jt_r) = model.predict_with_input_vjp(input, None, &mut |v| {
        let x_hat = x_from_v(z, v, lambda)?;
        for (slot, c) in [(0, &cond.start_frame), (CLIP_FRAMES - 1, &cond.end_frame)] {
            let c = reshape_frame(c)?.outer(0)?;
            r.set_outer(slot, &c.zip_map(&x_hat.outer(slot)?, |a, b| a - b)?)?;
        }
        Ok(r.clone())
    })?;
    let ab = alpha_sigma(lambda)?;
    let (two_a, two_s) = (T::from_f64_lossy(2.0 * ab.alpha), T::from_f64_lossy(2.0 * ab.sigma));
    let grad = r.zip_map(&jt_r, |ri, ji| two_s * ji - two_a * ri)?;
    Ok((v, grad))
}

/// `x_inpaint - (w - 1) (alpha_t / 2) grad`.
pub fn recon_guided_xhat<T: Scalar>(x_hat_inpaint: &Tensor<T>, grad: &Tensor<T>, w: f64, alpha_t: f64) -> Result<Tensor<T>> {
    if !(w.is_finite() && w >= 1.0) {
        return Err(Error::Domain(format!("reconstruction guidance weight must be >= 1, got {w}")));
    }
    if w == 1.0 {
        return Ok(x_hat_inpaint.clone());
    }
    let k = T::from_f64_lossy((w - 1.0) * alpha_t / 2.0);
    x_hat_inpaint.zip_map(grad, |x, g| x - k * g)
}

fn clip_unit<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.clamp(-T::one(), T::one())
}

/// The bare ancestral loop over the uniform grid from t=1 to t=0:
/// `z_s ~ q(z_s | z_t, x = x_hat(z_t, t, lambda_t))`, ending at the t=0 mean.
pub fn ancestral_chain<T: Scalar, R: rand::Rng + ?Sized>(
    mut z: Tensor<T>,
    steps: usize,
    schedule: &LogSnrSchedule,
    rng: &mut R,
    mut x_hat: impl FnMut(&Tensor<T>, f64, f64) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let grid = time_grid(steps)?;
    for pair in grid.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let x = x_hat(&z, t, schedule.log_snr(t)?)?;
        let noise = if s > 0.0 { Some(gaussian(rng, z.shape())) } else { None };
        z = ancestral_step(&z, &x, t, s, noise.as_ref(), schedule)?;
    }
    Ok(z)
}

/// Draw a 7-frame clip between the conditioning frames. Starts from unit
/// Gaussian noise at t=1 and walks the uniform grid down to t=0.
pub fn sample_video<T: Scalar, D: VideoDenoiser<T> + ?Sized>(
    model: &D,
    cond: &ConditioningPair<T>,
    sr: Option<&SrConditioning<T>>,
    cfg: &SamplerConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let schedule = model.schedule();
    let frames = match (cfg.mode, model.frame_conditioning()) {
        (GuidanceMode::Cfg, FrameConditioning::StartEnd) => GENERATED_FRAMES,
        (GuidanceMode::Imputation | GuidanceMode::ReconGuidance, FrameConditioning::Unconditional) => CLIP_FRAMES,
        (mode, c) => return Err(Error::Mode(format!("{mode:?} sampling is not defined for a {c:?} model"))),
    };
    if cond.dropped {
        return Err(Error::State("sampling needs real conditioning frames".into()));
    }
    let mut shape = vec![frames];
    shape.extend_from_slice(cond.frame_shape());
    let mut rng = stream(cfg.seed, NOISE_STREAM);
    // the null branch's noise frames are drawn once, whatever the weight
    let uncond = drop_conditioning(cond, &mut stream(cfg.seed, NULL_STREAM))?;
    let z: Tensor<T> = gaussian(&mut rng, &shape);
    let z = ancestral_chain(z, cfg.steps, &schedule, &mut rng, |z, t, lambda| {
        Ok(match cfg.mode {
            GuidanceMode::Cfg => {
                let w = cfg.weight;
                let v = if w == 1.0 {
                    model.predict(&[assemble_input(cond, z, t, &schedule)?], sr)?.remove(0)
                } else if w == 0.0 {
                    model.predict(&[assemble_input(&uncond, z, t, &schedule)?], sr)?.remove(0)
                } else {
                    let inputs = [assemble_input(cond, z, t, &schedule)?, assemble_input(&uncond, z, t, &schedule)?];
                    let mut vs = model.predict(&inputs, sr)?;
                    let vu = vs.pop().unwrap();
                    cfg_combine(&vs[0], &vu, w)?
                };
                clip_unit(&x_from_v(z, &v, lambda)?)
            }
            GuidanceMode::Imputation => {
                let v = model.predict(&[assemble_unconditional(z, t, &schedule)?], sr)?.remove(0);
                impute_replace(&clip_unit(&x_from_v(z, &v, lambda)?), cond)?
            }
            GuidanceMode::ReconGuidance => {
                let input = assemble_unconditional(z, t, &schedule)?;
                if cfg.weight == 1.0 {
                    let v = model.predict(&[input], sr)?.remove(0);
                    impute_replace(&clip_unit(&x_from_v(z, &v, lambda)?), cond)?
                } else {
                    let (v, grad) = recon_gradient(model, &input, cond, lambda)?;
                    let inpaint = impute_replace(&clip_unit(&x_from_v(z, &v, lambda)?), cond)?;
                    let alpha = alpha_sigma(lambda)?.alpha;
                    clip_unit(&recon_guided_xhat(&inpaint, &grad, cfg.weight, alpha)?)
                }
            }
        })
    })?;
    let z = clip_unit(&z);
    match frames {
        CLIP_FRAMES => z.slice_outer(1, GENERATED_FRAMES),
        _ => Ok(z),
    }
}

/// Closed-form denoisers for elementwise data distributions.
pub mod oracle {
    use super::*;
    use crate::diffusion::AlphaSigma;

    fn generated_slots(c: FrameConditioning) -> core::ops::Range<usize> {
        match c {
            FrameConditioning::StartEnd => 1..CLIP_FRAMES - 1,
            FrameConditioning::Unconditional => 0..CLIP_FRAMES,
        }
    }

    /// `v = (alpha z - E[x | z]) / sigma`, the exact v for a posterior mean.
    fn v_of<T: Scalar>(input: &ModelInput<T>, slots: core::ops::Range<usize>, post_mean: impl Fn(usize, f64, AlphaSigma) -> f64) -> Result<Tensor<T>> {
        let frame = input.frames.outer(0)?.len();
        let mut out = Vec::with_capacity(slots.len() * frame);
        let mut shape = input.frames.shape().to_vec();
        shape[0] = slots.len();
        for slot in slots {
            let ab = alpha_sigma(input.per_frame_log_snr[slot])?;
            for (j, &z) in input.frames.data()[slot * frame..(slot + 1) * frame].iter().enumerate() {
                let z = z.as_f64();
                let x = post_mean(slot * frame + j, z, ab);
                out.push(T::from_f64_lossy((ab.alpha * z - x) / ab.sigma));
            }
        }
        Tensor::from_vec(&shape, out)
    }

    /// Data concentrated on a single clip `x0` (9 frames; for a conditional
    /// denoiser only slots 1..=7 matter).
    pub struct PointMass<T> {
        pub x0: Tensor<T>,
        pub conditioning: FrameConditioning,
    }

    impl<T: Scalar> VideoDenoiser<T> for PointMass<T> {
        fn frame_conditioning(&self) -> FrameConditioning {
            self.conditioning
        }

        fn predict(&self, inputs: &[ModelInput<T>], _: Option<&SrConditioning<T>>) -> Result<Vec<Tensor<T>>> {
            inputs
                .iter()
                .map(|inp| {
                    inp.frames.ensure_same_shape(&self.x0, "point-mass oracle")?;
                    let x0 = self.x0.data();
                    v_of(inp, generated_slots(self.conditioning), |k, _, _| x0[k].as_f64())
                })
                .collect()
        }

        fn predict_with_input_vjp(
            &self,
            input: &ModelInput<T>,
            _: Option<&SrConditioning<T>>,
            upstream: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
        ) -> Result<(Tensor<T>, Tensor<T>)> {
            let v = self.predict(core::slice::from_ref(input), None)?.remove(0);
            let upstream = upstream(&v)?;
            // dv/dz = alpha / sigma on the generated slots
            let mut dz = Tensor::zeros(input.frames.shape());
            let frame = dz.outer(0)?.len();
            for (k, slot) in generated_slots(self.conditioning).enumerate() {
                let ab = alpha_sigma(input.per_frame_log_snr[slot])?;
                let c = T::from_f64_lossy(ab.alpha / ab.sigma);
                for j in 0..frame {
                    dz.data_mut()[slot * frame + j] = c * upstream.data()[k * frame + j];
                }
            }
            Ok((v, dz))
        }
    }

    /// Every pixel independently `N(mean, std^2)`.
    pub struct Gaussian {
        pub mean: f64,
        pub std: f64,
        pub conditioning: FrameConditioning,
    }

    impl Gaussian {
        fn gain(&self, ab: AlphaSigma) -> f64 {
            let s2 = self.std * self.std;
            ab.alpha * s2 / (ab.alpha * ab.alpha * s2 + ab.sigma * ab.sigma)
        }
    }

    impl<T: Scalar> VideoDenoiser<T> for Gaussian {
        fn frame_conditioning(&self) -> FrameConditioning {
            self.conditioning
        }

        fn predict(&self, inputs: &[ModelInput<T>], _: Option<&SrConditioning<T>>) -> Result<Vec<Tensor<T>>> {
            inputs
                .iter()
                .map(|inp| v_of(inp, generated_slots(self.conditioning), |_, z, ab| self.mean + self.gain(ab) * (z - ab.alpha * self.mean)))
                .collect()
        }

        fn predict_with_input_vjp(
            &self,
            input: &ModelInput<T>,
            _: Option<&SrConditioning<T>>,
            upstream: &mut dyn FnMut(&Tensor<T>) -> Result<Tensor<T>>,
        ) -> Result<(Tensor<T>, Tensor<T>)> {
            let v = self.predict(core::slice::from_ref(input), None)?.remove(0);
            let upstream = upstream(&v)?;
            let mut dz = Tensor::zeros(input.frames.shape());
            let frame = dz.outer(0)?.len();
            for (k, slot) in generated_slots(self.conditioning).enumerate() {
                let ab = alpha_sigma(input.per_frame_log_snr[slot])?;
                let c = T::from_f64_lossy((ab.alpha - self.gain(ab)) / ab.sigma);
                for j in 0..frame {
                    dz.data_mut()[slot * frame + j] = c * upstream.data()[k * frame + j];
                }
            }
            Ok((v, dz))
        }
    }
}
