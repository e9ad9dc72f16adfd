//! Spatial resampling between cascade stages.

use alloc::format;
use alloc::vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

fn integer_factor(factor: f64) -> Result<usize> {
    if !(factor.is_finite() && factor >= 1.0 && libm::trunc(factor) == factor) {
        return Err(Error::Config(format!("resampling factor must be a positive integer, got {factor}")));
    }
    Ok(factor as usize)
}

fn split_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((1, shape[0], shape[1])),
        n if n >= 3 => Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1])),
        _ => Err(shape_err!("resampling needs at least [H, W], got {:?}", shape)),
    }
}

/// Bilinear upsampling with half-pixel centres and edge clamping; applies to
/// the two trailing axes. Constant images stay constant; `factor = 1` is the
/// identity.
pub fn naive_upsample<T: Scalar>(frames: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let f = integer_factor(factor)?;
    let (planes, h, w) = split_shape(frames.shape())?;
    if f == 1 {
        return Ok(frames.clone());
    }
    let (ho, wo) = (h * f, w * f);
    let taps = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let src = frames.data();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            let (y0, y1, fy) = taps(y, h);
            for x in 0..wo {
                let (x0, x1, fx) = taps(x, w);
                let v = |r: usize, c: usize| plane[r * w + c].as_f64();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out[p * ho * wo + y * wo + x] = T::from_f64_lossy(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let mut shape = frames.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::from_vec(&shape, out)
}

/// Box-filter downsampling by an integer factor over the two trailing axes.
pub fn area_downsample<T: Scalar>(frames: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let f = integer_factor(factor)?;
    let (planes, h, w) = split_shape(frames.shape())?;
    if h % f != 0 || w % f != 0 {
        return Err(shape_err!("{}x{} is not divisible by {}", h, w, f));
    }
    let (ho, wo) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let src = frames.data();
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += src[p * h * w + (y * f + dy) * w + x * f + dx].as_f64();
                    }
                }
                out[p * ho * wo + y * wo + x] = T::from_f64_lossy(acc * norm);
            }
        }
    }
    let mut shape = frames.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::from_vec(&shape, out)
}
