//! Weighted L1 objective, Adam with warmup and clipping, and the EMA shadow.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::conditioning::{
    assemble_input, assemble_unconditional, maybe_drop, noise_augment, ConditioningPair, ModelInput, CLIP_FRAMES,
};
use crate::denoiser::{Denoiser, FrameConditioning, SrConditioning, Variant, SR_FACTOR};
use crate::diffusion::{alpha_sigma, forward_sample, loss_weight};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Graph, ParamStore};
use crate::resample::area_downsample;
use crate::rng::{gaussian, stream, VidimRng};
use crate::tensor::{Scalar, Tensor};

/// Stream id of the training generator under the run seed.
pub const TRAIN_STREAM: u64 = 0x7a11;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Base,
    Sr,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Sr => "sr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
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
    pub stage: Stage,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            ema_decay: 0.9999,
            batch_size: 8,
            total_steps: 20_000,
            cfg_drop_prob: 0.1,
            stage: Stage::Base,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema_decay", self.ema_decay)] {
            if !(v > 0.0 && v < 1.0) {
                return err(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.warmup_steps == 0 || self.batch_size == 0 || self.total_steps == 0 {
            return err("warmup_steps, batch_size and total_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cfg_drop_prob) {
            return err(format!("cfg_drop_prob {} outside [0, 1)", self.cfg_drop_prob));
        }
        Ok(())
    }

    /// `lr * min(1, step / warmup)`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// One training clip and its dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub id: u64,
    /// `[9, C, H, W]` at the stage resolution.
    pub clip: Tensor<T>,
}

/// `e^{lambda/2} * mean |alpha z - sigma v - x|`, the x-space weighted L1 of
/// one example.
pub fn example_loss<T: Scalar>(x: &Tensor<T>, z: &Tensor<T>, v: &Tensor<T>, lambda: f64) -> Result<f64> {
    x.ensure_same_shape(z, "example_loss x vs z")?;
    x.ensure_same_shape(v, "example_loss x vs v")?;
    let s = alpha_sigma(lambda)?;
    let w = loss_weight(lambda)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(z.data())
        .zip(v.data())
        .map(|((&x, &z), &v)| libm::fabs(s.alpha * z.as_f64() - s.sigma * v.as_f64() - x.as_f64()))
        .sum();
    Ok(w * sum / x.len() as f64)
}

pub fn check_stage<T: Scalar>(model: &Denoiser<T>, stage: Stage) -> Result<()> {
    let matches = matches!(
        (model.config().variant, stage),
        (Variant::Base, Stage::Base) | (Variant::SuperResolution, Stage::Sr)
    );
    if !matches {
        return Err(Error::Config(format!("{:?} model cannot train the {} stage", model.config().variant, stage.name())));
    }
    Ok(())
}

/// Noised inputs of one batch plus what the loss needs to score them.
struct Prepared<T> {
    inputs: Vec<ModelInput<T>>,
    sr: Vec<Option<SrConditioning<T>>>,
    targets: Vec<Tensor<T>>,
    noisy: Vec<Tensor<T>>,
    lambdas: Vec<f64>,
}

fn prepare<T: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<T>,
    examples: &[Example<T>],
    cfg_drop_prob: f64,
    rng: &mut R,
) -> Result<Prepared<T>> {
    let c = model.config();
    let frame = [c.image_channels, c.resolution, c.resolution];
    let slots = c.output_slots();
    let schedule = model.schedule();
    let mut p = Prepared {
        inputs: Vec::with_capacity(examples.len()),
        sr: Vec::with_capacity(examples.len()),
        targets: Vec::with_capacity(examples.len()),
        noisy: Vec::with_capacity(examples.len()),
        lambdas: Vec::with_capacity(examples.len()),
    };
    for ex in examples {
        let s = ex.clip.shape();
        if s.len() != 4 || s[0] != CLIP_FRAMES || s[1..] != frame {
            return Err(Error::Config(format!("clip {} has shape {:?}, stage expects [9, {:?}]", ex.id, s, frame)));
        }
        let x = ex.clip.slice_outer(slots[0], slots.len())?;
        let cond = match c.conditioning {
            FrameConditioning::StartEnd => Some(maybe_drop(&ConditioningPair::from_clip(&ex.clip)?, cfg_drop_prob, rng)?),
            FrameConditioning::Unconditional => None,
        };
        let t: f64 = rng.random();
        let eps = gaussian(rng, x.shape());
        let noisy = forward_sample(&x, t, &eps, schedule)?;
        let input = match &cond {
            Some(cond) => assemble_input(cond, &noisy.z, t, schedule)?,
            None => assemble_unconditional(&noisy.z, t, schedule)?,
        };
        let sr = match c.variant {
            Variant::Base => None,
            Variant::SuperResolution => {
                let low = area_downsample(&x, SR_FACTOR as f64)?;
                let (low_res, aug_level) = noise_augment(&low, rng, schedule)?;
                Some(SrConditioning { low_res, aug_level })
            }
        };
        p.lambdas.push(schedule.log_snr(t)?);
        p.inputs.push(input);
        p.sr.push(sr);
        p.targets.push(x);
        p.noisy.push(noisy.z);
    }
    Ok(p)
}

/// Batch loss and its gradient with respect to the stacked v-predictions.
/// Since `e^{lambda/2} sigma = alpha`, the gradient of one element is
/// `-alpha * sign(x_hat - x) / (N * B)`.
fn loss_and_upstream<T: Scalar>(p: &Prepared<T>, v: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let b = p.targets.len();
    let per = p.targets[0].len();
    if v.len() != b * per {
        return Err(shape_err!("prediction of {} values for {} examples of {}", v.len(), b, per));
    }
    let mut upstream = Vec::with_capacity(v.len());
    let mut loss = 0.0;
    for (k, ((x, z), &lambda)) in p.targets.iter().zip(&p.noisy).zip(&p.lambdas).enumerate() {
        let s = alpha_sigma(lambda)?;
        let w = loss_weight(lambda)?;
        let vk = &v.data()[k * per..(k + 1) * per];
        let scale = -s.alpha / (per * b) as f64;
        let mut sum = 0.0;
        for ((&x, &z), &v) in x.data().iter().zip(z.data()).zip(vk) {
            let d = s.alpha * z.as_f64() - s.sigma * v.as_f64() - x.as_f64();
            sum += libm::fabs(d);
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            upstream.push(T::from_f64_lossy(scale * sign));
        }
        loss += w * sum / per as f64;
    }
    Ok((loss / b as f64, Tensor::from_vec(v.shape(), upstream)?))
}

/// The objective on one batch with the model in evaluation mode.
pub fn training_loss<T: Scalar, R: Rng + ?Sized>(
    model: &Denoiser<T>,
    examples: &[Example<T>],
    cfg_drop_prob: f64,
    rng: &mut R,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let p = prepare(model, examples, cfg_drop_prob, rng)?;
    let batch = model.make_batch(&p.inputs, &p.sr)?;
    let v = model.predict_batch(&batch)?;
    Ok(loss_and_upstream(&p, &v)?.0)
}

/// `shadow <- decay * shadow + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if !shadow.same_layout(params) {
        return Err(shape_err!("EMA shadow and parameters have different layouts"));
    }
    for (s, p) in shadow.values_mut().iter_mut().zip(params.values()) {
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = T::from_f64_lossy(decay * a.as_f64() + (1.0 - decay) * b.as_f64());
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum())
}

/// Rescale to global norm at most `max_norm`; returns the norm before
/// clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::from_f64_lossy(v.as_f64() * f));
        }
    }
    norm
}

/// Full ChaCha state, enough to resume the exact stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngCursor {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngCursor {
    pub fn capture(rng: &VidimRng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> VidimRng {
        let mut rng = VidimRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything a resumed run needs.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Denoiser<T>,
    pub ema: ParamStore<T>,
    pub adam_m: ParamStore<T>,
    pub adam_v: ParamStore<T>,
    pub step: u64,
    pub rng: VidimRng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: Denoiser<T>, seed: u64) -> Self {
        let ema = model.params().clone();
        let zeros = model.params().zeros_like();
        Self { model, ema, adam_m: zeros.clone(), adam_v: zeros, step: 0, rng: stream(seed, TRAIN_STREAM) }
    }

    /// The model with the EMA weights, used for sampling and evaluation.
    pub fn ema_model(&self) -> Result<Denoiser<T>> {
        self.model.with_params(self.ema.clone())
    }
}

/// One optimisation step: loss, clipped gradients, Adam with warmed-up rate,
/// EMA update, step increment.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, cfg: &TrainConfig, examples: &[Example<T>]) -> Result<StepStats> {
    check_stage(&state.model, cfg.stage)?;
    if examples.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let model = &state.model;
    let p = prepare(model, examples, cfg.cfg_drop_prob, &mut state.rng)?;
    let batch = model.make_batch(&p.inputs, &p.sr)?;
    let mut g = Graph::training(VidimRng::seed_from_u64(state.rng.random()));
    let mut bound = Bound::new(model.params().len());
    let frames = g.constant(batch.frames.clone());
    let out = model.forward(&mut g, &mut bound, &batch, frames, true)?;
    let (loss, upstream) = loss_and_upstream(&p, g.value(out))?;
    let non_finite = |what: &str| Error::NonFinite {
        step: state.step,
        detail: format!(
            "{what}; lambda draws {:?}; batch ids {:?}",
            p.lambdas,
            examples.iter().map(|e| e.id).collect::<Vec<_>>()
        ),
    };
    if !loss.is_finite() {
        return Err(non_finite("loss"));
    }
    let mut grads = model.param_gradients(&g, &bound, out, upstream)?;
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient norm"));
    }
    let lr = cfg.learning_rate_at(state.step);
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - libm::pow(cfg.beta1, t as f64), 1.0 - libm::pow(cfg.beta2, t as f64));
    let params = state.model.params_mut().values_mut();
    let moments = state.adam_m.values_mut().iter_mut().zip(state.adam_v.values_mut());
    for ((p, (m, v)), g) in params.iter_mut().zip(moments).zip(&grads) {
        for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = g.as_f64();
            let mn = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
            *m = T::from_f64_lossy(mn);
            *v = T::from_f64_lossy(vn);
            let step = lr * (mn / c1) / (libm::sqrt(vn / c2) + cfg.adam_eps);
            *p = T::from_f64_lossy(p.as_f64() - step);
        }
    }
    ema_update(&mut state.ema, state.model.params(), cfg.ema_decay)?;
    state.step += 1;
    Ok(StepStats { step: state.step, loss, lr, grad_norm })
}

/// Batch `step` of the synthetic training stream over a dataset of
/// `dataset_size` clips, visited in index order.
pub fn synthetic_batch<T: Scalar>(
    global_seed: u64,
    dataset_size: u64,
    step: u64,
    batch_size: usize,
    resolution: usize,
) -> Result<Vec<Example<T>>> {
    if dataset_size == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    (0..batch_size as u64)
        .map(|i| {
            let id = (step * batch_size as u64 + i) % dataset_size;
            let clip = crate::synth::training_example(global_seed, id, resolution)?;
            Ok(Example { id, clip: clip.frames })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{LevelConfig, ModelConfig};
    use crate::diffusion::{eps_from_v, forward_at, v_target};
    use crate::rng::uniform;

    fn tiny(conditioning: FrameConditioning) -> ModelConfig {
        ModelConfig {
            variant: Variant::Base,
            conditioning,
            resolution: 8,
            image_channels: 3,
            levels: alloc::vec![
                LevelConfig { size: 8, channels: 8, subblocks: 1, heads: 1, spatial_attention: false },
                LevelConfig { size: 4, channels: 8, subblocks: 1, heads: 1, spatial_attention: true },
            ],
            embed_dim: 8,
            cond_dim: 16,
            norm_groups: 2,
            mlp_ratio: 1,
            dropout_rate: 0.0,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig { warmup_steps: 2, batch_size: 2, total_steps: 10, ema_decay: 0.9, ..TrainConfig::default() }
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..cfg() },
            TrainConfig { cfg_drop_prob: 1.0, ..cfg() },
            TrainConfig { beta2: 1.0, ..cfg() },
            TrainConfig { batch_size: 0, ..cfg() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn loss_examples() {
        let x: Tensor<f64> = Tensor::full(&[4], 1.0);
        let eps = Tensor::zeros(&[4]);
        let z = forward_at(&x, 0.0, &eps).unwrap().z;
        assert!(example_loss(&x, &z, &v_target(&x, &eps, 0.0).unwrap(), 0.0).unwrap() < 1e-12);
        assert!((example_loss(&x, &z, &Tensor::zeros(&[4]), 0.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_eps_space_l1() {
        let mut rng = stream(5, 5);
        for _ in 0..200 {
            let lambda = uniform(&mut rng, -20.0, 20.0);
            let x: Tensor<f64> = gaussian(&mut rng, &[6]);
            let eps: Tensor<f64> = gaussian(&mut rng, &[6]);
            let v: Tensor<f64> = gaussian(&mut rng, &[6]);
            let z = forward_at(&x, lambda, &eps).unwrap().z;
            let l = example_loss(&x, &z, &v, lambda).unwrap();
            let e = eps_from_v(&z, &v, lambda).unwrap();
            let l_eps = e.data().iter().zip(eps.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 6.0;
            assert!((l - l_eps).abs() <= 1e-6 * l_eps.max(1e-12), "{l} vs {l_eps} at {lambda}");
        }
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.0);
        assert!((c.learning_rate_at(5_000) - 2.5e-4).abs() < 1e-15);
        assert_eq!(c.learning_rate_at(10_000), 5e-4);
        assert_eq!(c.learning_rate_at(50_000), 5e-4);
    }

    #[test]
    fn clipping_scales_large_gradients() {
        let mut g = alloc::vec![Tensor::<f64>::from_vec(&[2], alloc::vec![6.0, 8.0]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 10.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
        let mut small = alloc::vec![Tensor::<f64>::full(&[1], 0.5)];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].data()[0], 0.5);
    }

    #[test]
    fn ema_examples() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::full(&[3], 1.0));
        let mut shadow = p.zeros_like();
        ema_update(&mut shadow, &p, 0.9999).unwrap();
        assert!((shadow.values()[0].data()[0] - 1e-4).abs() < 1e-15);
        let mut s = p.zeros_like();
        for _ in 0..5 {
            ema_update(&mut s, &p, 0.5).unwrap();
        }
        assert!((1.0 - s.values()[0].data()[0] - 0.5f64.powi(5)).abs() < 1e-15);
        let mut s0 = p.zeros_like();
        ema_update(&mut s0, &p, 0.0).unwrap();
        assert_eq!(s0, p);
        let mut other = ParamStore::<f64>::new();
        other.insert("w", Tensor::zeros(&[2]));
        assert!(matches!(ema_update(&mut other, &p, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn stage_and_shape_mismatch() {
        let model = Denoiser::<f32>::new(tiny(FrameConditioning::StartEnd), 1).unwrap();
        let mut state = TrainState::new(model, 1);
        let batch = synthetic_batch::<f32>(3, 100, 0, 2, 8).unwrap();
        let sr = TrainConfig { stage: Stage::Sr, ..cfg() };
        assert!(matches!(train_step(&mut state, &sr, &batch), Err(Error::Config(_))));
        let wrong = synthetic_batch::<f32>(3, 100, 0, 2, 16).unwrap();
        assert!(matches!(train_step(&mut state, &cfg(), &wrong), Err(Error::Config(_))));
    }

    #[test]
    fn first_step_only_moves_moments() {
        let model = Denoiser::<f64>::new(tiny(FrameConditioning::StartEnd), 1).unwrap();
        let before = model.params().clone();
        let mut state = TrainState::new(model, 1);
        let stats = train_step(&mut state, &cfg(), &synthetic_batch(3, 100, 0, 2, 8).unwrap()).unwrap();
        assert_eq!((stats.step, stats.lr), (1, 0.0));
        assert_eq!(state.model.params(), &before);
        assert!(state.adam_m.values().iter().any(|m| m.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        for conditioning in [FrameConditioning::StartEnd, FrameConditioning::Unconditional] {
            let model = Denoiser::<f32>::new(tiny(conditioning), 2).unwrap();
            let mut state = TrainState::new(model, 2);
            let c = TrainConfig { learning_rate: 3e-3, cfg_drop_prob: 0.0, ..cfg() };
            let batch = synthetic_batch::<f32>(9, 4, 0, 4, 8).unwrap();
            let eval = |m: &Denoiser<f32>| training_loss(m, &batch, 0.0, &mut stream(77, 0)).unwrap();
            let l0 = eval(&state.model);
            for _ in 0..80 {
                train_step(&mut state, &c, &batch).unwrap();
            }
            let l1 = eval(&state.model);
            assert!(l1 < 0.85 * l0, "{conditioning:?}: {l0} -> {l1}");
        }
    }

    #[test]
    fn resume_is_bitwise_identical() {
        let model = Denoiser::<f32>::new(tiny(FrameConditioning::StartEnd), 4).unwrap();
        let c = cfg();
        let mut a = TrainState::new(model, 4);
        let batches: Vec<_> = (0..4).map(|s| synthetic_batch::<f32>(1, 50, s, 2, 8).unwrap()).collect();
        for b in &batches[..2] {
            train_step(&mut a, &c, b).unwrap();
        }
        let cursor = RngCursor::capture(&a.rng);
        let mut b = TrainState { rng: cursor.restore(), ..a.clone() };
        for batch in &batches[2..] {
            let sa = train_step(&mut a, &c, batch).unwrap();
            let sb = train_step(&mut b, &c, batch).unwrap();
            assert_eq!(sa, sb);
        }
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn synthetic_stream_wraps() {
        let a = synthetic_batch::<f32>(1, 3, 0, 2, 8).unwrap();
        let b = synthetic_batch::<f32>(1, 3, 1, 2, 8).unwrap();
        assert_eq!(a.iter().map(|e| e.id).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(b.iter().map(|e| e.id).collect::<Vec<_>>(), [2, 0]);
        assert_eq!(a[0], b[1]);
    }
}
