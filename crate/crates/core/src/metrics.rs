//! Reconstruction metrics and the sample-diversity probe. Frames are
//! `[C, H, W]` in `[-1, 1]`; every metric first maps pixels to `[0, 1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::conditioning::{CLIP_FRAMES, GENERATED_FRAMES};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Slot of the middle frame in the 9-frame clip.
pub const MIDDLE_SLOT: usize = 4;

fn unit<T: Scalar>(v: T) -> f64 {
    (v.as_f64() + 1.0) / 2.0
}

/// `10 log10(1 / MSE)` on `[0, 1]` pixels; `+inf` for identical frames.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    pred.ensure_same_shape(truth, "psnr")?;
    if pred.is_empty() {
        return Err(shape_err!("psnr of empty frames"));
    }
    let mse = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| {
            let d = unit(a) - unit(b);
            d * d
        })
        .sum::<f64>()
        / pred.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * libm::log10(mse) })
}

fn gray<T: Scalar>(frame: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let s = frame.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(shape_err!("expected a [C, H, W] frame, got {:?}", s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for (gi, &v) in g.iter_mut().zip(&frame.data()[ch * h * w..(ch + 1) * h * w]) {
            *gi += unit(v) / c as f64;
        }
    }
    Ok((g, h, w))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = core::array::from_fn(|i| {
        let x = i as f64 - r;
        libm::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filtering.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|j| k[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over valid 11x11 Gaussian windows of the grayscale
/// (channel-mean) frames.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    pred.ensure_same_shape(truth, "ssim")?;
    let (x, h, w) = gray(pred)?;
    let (y, _, _) = gray(truth)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!("{h}x{w} frame is smaller than the {SSIM_WINDOW}px SSIM window")));
    }
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter(&x, h, w, &k);
    let my = filter(&y, h, w, &k);
    let xx = filter(&prod(&x, &x), h, w, &k);
    let yy = filter(&prod(&y, &y), h, w, &k);
    let xy = filter(&prod(&x, &y), h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let (vx, vy, cxy) = (xx[i] - a * a, yy[i] - b * b, xy[i] - a * b);
            ((2.0 * a * b + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per generated frame, the pixel mean of the across-sample standard
/// deviation (n-1 normalisation, `[0, 1]` pixels).
pub fn diversity_score<T: Scalar>(samples: &[Tensor<T>]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("diversity needs at least 2 samples, got {}", samples.len())));
    }
    let shape = samples[0].shape();
    if shape.len() != 4 || shape[0] == 0 {
        return Err(shape_err!("samples must be [F, C, H, W], got {:?}", shape));
    }
    for s in samples {
        s.ensure_same_shape(&samples[0], "diversity_score")?;
    }
    let n = samples.len() as f64;
    let per = samples[0].len() / shape[0];
    Ok((0..shape[0])
        .map(|f| {
            let acc: f64 = (f * per..(f + 1) * per)
                .map(|j| {
                    // offsets from the first sample keep identical samples at exactly 0
                    let x0 = unit(samples[0].data()[j]);
                    let d = |s: &Tensor<T>| unit(s.data()[j]) - x0;
                    let m = samples.iter().map(d).sum::<f64>() / n;
                    let var = samples.iter().map(|s| (d(s) - m).powi(2)).sum::<f64>() / (n - 1.0);
                    libm::sqrt(var)
                })
                .sum();
            acc / per as f64
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Only slot 4 of 9.
    Middle,
    /// Generated slots 1..=7.
    All7,
}

impl Protocol {
    /// Clip slots (0..9 numbering) the protocol scores.
    pub fn slots(self) -> Vec<usize> {
        match self {
            Protocol::Middle => vec![MIDDLE_SLOT],
            Protocol::All7 => (1..=GENERATED_FRAMES).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Middle => "middle",
            Protocol::All7 => "all7",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub clip_id: String,
    pub protocol: Protocol,
    /// Scored clip slots, parallel to `psnr` and `ssim`.
    pub slots: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub n_samples: usize,
}

impl MetricsRecord {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Score 7 generated frames against a 9-frame ground-truth clip.
pub fn score_clip<T: Scalar>(clip_id: &str, generated: &Tensor<T>, truth: &Tensor<T>, protocol: Protocol) -> Result<MetricsRecord> {
    if generated.shape().first() != Some(&GENERATED_FRAMES) || truth.shape().first() != Some(&CLIP_FRAMES) {
        return Err(shape_err!("expected 7 generated and 9 true frames, got {:?} and {:?}", generated.shape(), truth.shape()));
    }
    let slots = protocol.slots();
    let mut psnrs = Vec::with_capacity(slots.len());
    let mut ssims = Vec::with_capacity(slots.len());
    for &slot in &slots {
        let (g, t) = (generated.outer(slot - 1)?, truth.outer(slot)?);
        psnrs.push(psnr(&g, &t)?);
        ssims.push(ssim(&g, &t)?);
    }
    Ok(MetricsRecord { clip_id: clip_id.into(), protocol, slots, psnr: psnrs, ssim: ssims, n_samples: 1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub protocol: Protocol,
    pub clips: usize,
    pub skipped: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Mean over clips of each clip's frame-mean.
pub fn summarize(records: &[MetricsRecord], protocol: Protocol, skipped: usize) -> Summary {
    let p: Vec<f64> = records.iter().map(MetricsRecord::mean_psnr).collect();
    let s: Vec<f64> = records.iter().map(MetricsRecord::mean_ssim).collect();
    Summary { protocol, clips: records.len(), skipped, mean_psnr: mean(&p), mean_ssim: mean(&s) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, stream};

    fn frame(v: f64) -> Tensor<f64> {
        Tensor::full(&[3, 16, 16], v)
    }

    #[test]
    fn psnr_examples() {
        let a = frame(0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // 0.2 in [-1, 1] is 0.1 in [0, 1]
        assert!((psnr(&frame(0.1), &frame(0.3)).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&frame(-1.0), &frame(0.0)).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(matches!(psnr(&a, &Tensor::zeros(&[3, 16, 15])), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_examples() {
        let mut rng = stream(1, 1);
        let a: Tensor<f64> = gaussian::<f64, _>(&mut rng, &[3, 20, 20]).clamp(-1.0, 1.0);
        let b: Tensor<f64> = gaussian::<f64, _>(&mut rng, &[3, 20, 20]).clamp(-1.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c1 = SSIM_C1;
        assert!((ssim(&frame(-1.0), &frame(1.0)).unwrap() - c1 / (1.0 + c1)).abs() < 1e-15);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        assert!(matches!(ssim(&Tensor::<f64>::zeros(&[3, 10, 12]), &Tensor::zeros(&[3, 10, 12])), Err(Error::Size(_))));
    }

    #[test]
    fn metrics_fall_with_noise() {
        let mut rng = stream(2, 2);
        let truth: Tensor<f64> = gaussian::<f64, _>(&mut rng, &[3, 16, 16]).map(|v| 0.5 * libm::tanh(v));
        let mut last = (f64::INFINITY, 1.0);
        for scale in [0.02, 0.05, 0.1, 0.2] {
            let (mut p, mut s) = (0.0, 0.0);
            for _ in 0..100 {
                let noise: Tensor<f64> = gaussian(&mut rng, &[3, 16, 16]);
                let pred = truth.zip_map(&noise, |a, b| a + scale * b).unwrap();
                p += psnr(&pred, &truth).unwrap() / 100.0;
                s += ssim(&pred, &truth).unwrap() / 100.0;
            }
            assert!(p < last.0 && s < last.1, "scale {scale}: {p} {s}");
            last = (p, s);
        }
    }

    #[test]
    fn diversity_examples() {
        let mut rng = stream(3, 3);
        let a: Tensor<f64> = gaussian(&mut rng, &[7, 3, 4, 4]);
        assert_eq!(diversity_score(&[a.clone(), a.clone(), a.clone()]).unwrap(), vec![0.0; 7]);
        assert!(matches!(diversity_score(core::slice::from_ref(&a)), Err(Error::Config(_))));
        // two samples differing by 2 in [-1, 1] (1 in [0, 1]) on frame 3 only
        let mut b = a.clone();
        let f = b.outer(3).unwrap().map(|v| v + 2.0);
        b.set_outer(3, &f).unwrap();
        let d = diversity_score(&[a, b]).unwrap();
        assert!((d[3] - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn protocols_agree_on_the_middle_frame() {
        let mut rng = stream(4, 4);
        let truth: Tensor<f64> = gaussian::<f64, _>(&mut rng, &[9, 3, 12, 12]).clamp(-1.0, 1.0);
        let gen: Tensor<f64> = gaussian::<f64, _>(&mut rng, &[7, 3, 12, 12]).clamp(-1.0, 1.0);
        let mid = score_clip("c", &gen, &truth, Protocol::Middle).unwrap();
        let all = score_clip("c", &gen, &truth, Protocol::All7).unwrap();
        assert_eq!(mid.psnr.len(), 1);
        assert_eq!(all.slots, vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(all.psnr[3], mid.psnr[0]);
        assert_eq!(all.ssim[3], mid.ssim[0]);
        let perfect = score_clip("c", &truth.slice_outer(1, 7).unwrap(), &truth, Protocol::All7).unwrap();
        assert!(perfect.psnr.iter().all(|p| p.is_infinite()));
        assert!(perfect.ssim.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        let s = summarize(&[mid.clone(), mid], Protocol::Middle, 1);
        assert_eq!((s.clips, s.skipped), (2, 1));
    }
}
