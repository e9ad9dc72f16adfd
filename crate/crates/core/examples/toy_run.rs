//! Train a toy base model on the synthetic stream and report held-out
//! middle-frame PSNR as it goes.
//!
//! usage: toy_run [steps] [batch] [lr] [warmup] [ema] [eval_every] [uncond]

use std::time::Instant;
use vidim_core::conditioning::ConditioningPair;
use vidim_core::denoiser::{Denoiser, FrameConditioning, ModelConfig};
use vidim_core::metrics::{psnr, ssim};
use vidim_core::sampler::{sample_video, GuidanceMode, SamplerConfig};
use vidim_core::synth::gen_synthetic_clip;
use vidim_core::training::{synthetic_batch, train_step, TrainConfig, TrainState};

fn arg<T: std::str::FromStr>(i: usize, d: T) -> T {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(d)
}

fn eval(model: &Denoiser<f32>, clips: usize, steps: usize) -> (f64, f64) {
    let (mut p, mut s) = (0.0, 0.0);
    let uncond = model.config().conditioning == FrameConditioning::Unconditional;
    for i in 0..clips {
        let (clip, _) = gen_synthetic_clip::<f32>(1_000_000 + i as u64, 32, false).unwrap();
        let cond = ConditioningPair::from_clip(&clip.frames).unwrap();
        let mode = if uncond { GuidanceMode::Imputation } else { GuidanceMode::Cfg };
        let cfg = SamplerConfig { steps, mode, weight: 2.0, seed: i as u64 };
        let out = sample_video(model, &cond, None, &cfg).unwrap();
        let (g, t) = (out.outer(3).unwrap(), clip.frames.outer(4).unwrap());
        p += psnr(&g, &t).unwrap().min(60.0) / clips as f64;
        s += ssim(&g, &t).unwrap() / clips as f64;
    }
    (p, s)
}

fn main() {
    let steps: u64 = arg(1, 1000);
    let mut config = ModelConfig::toy_base();
    if arg(7, 0u8) == 1 {
        config.conditioning = FrameConditioning::Unconditional;
    }
    let cfg = TrainConfig {
        batch_size: arg(2, 8),
        learning_rate: arg(3, 1e-3),
        warmup_steps: arg(4, 100),
        ema_decay: arg(5, 0.999),
        total_steps: steps,
        ..TrainConfig::default()
    };
    let every: u64 = arg(6, 250);
    let mut state = TrainState::new(Denoiser::<f32>::new(config, 0).unwrap(), 0);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for step in 0..steps {
        let batch = synthetic_batch(7, 50_000, step, cfg.batch_size, 32).unwrap();
        let st = train_step(&mut state, &cfg, &batch).unwrap();
        acc += st.loss;
        if st.step % 50 == 0 {
            println!("step {} loss {:.4} gnorm {:.3} t {:.0}s", st.step, acc / 50.0, st.grad_norm, t0.elapsed().as_secs_f64());
            acc = 0.0;
        }
        if st.step % every == 0 {
            let (p, s) = eval(&state.ema_model().unwrap(), 8, 32);
            let (pr, sr) = eval(&state.model, 8, 32);
            println!("eval {} ema psnr {p:.2} ssim {s:.3} | raw psnr {pr:.2} ssim {sr:.3} t {:.0}s", st.step, t0.elapsed().as_secs_f64());
        }
    }
}
