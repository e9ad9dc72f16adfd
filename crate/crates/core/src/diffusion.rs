//! Continuous-time diffusion arithmetic: the cosine log-SNR schedule, the
//! forward process, v-parametrization conversions, loss weighting and the
//! ancestral (posterior) transition. Coefficients are always evaluated in
//! `f64`; element arithmetic is done in `f64` and rounded into the tensor's
//! scalar type.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAMBDA_MAX: f64 = 20.0;
pub const LAMBDA_MIN: f64 = -20.0;

/// Cosine log-SNR schedule `t -> lambda(t)` with `lambda(0) = lambda_max` and
/// `lambda(1) = lambda_min`:
///
/// `lambda(t) = -2 ln tan(theta_min + t (theta_max - theta_min))`,
/// `theta_min = atan(exp(-lambda_max / 2))`, `theta_max = atan(exp(-lambda_min / 2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogSnrSchedule {
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl Default for LogSnrSchedule {
    fn default() -> Self {
        Self { lambda_max: LAMBDA_MAX, lambda_min: LAMBDA_MIN }
    }
}

impl LogSnrSchedule {
    pub fn new(lambda_max: f64, lambda_min: f64) -> Result<Self> {
        if !(lambda_max.is_finite() && lambda_min.is_finite() && lambda_max > lambda_min) {
            return Err(Error::Domain(format!(
                "schedule endpoints must be finite with max > min, got ({lambda_max}, {lambda_min})"
            )));
        }
        Ok(Self { lambda_max, lambda_min })
    }

    fn theta_range(&self) -> (f64, f64) {
        (
            libm::atan(libm::exp(-0.5 * self.lambda_max)),
            libm::atan(libm::exp(-0.5 * self.lambda_min)),
        )
    }

    pub fn log_snr(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let (lo, hi) = self.theta_range();
        Ok(-2.0 * libm::log(libm::tan(lo + t * (hi - lo))))
    }

    pub fn alpha_sigma_at(&self, t: f64) -> Result<AlphaSigma> {
        alpha_sigma(self.log_snr(t)?)
    }
}

/// Signal and noise scales at one log-SNR; `alpha^2 + sigma^2 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaSigma {
    pub alpha: f64,
    pub sigma: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("log-SNR must be finite, got {lambda}")))
    }
}

pub fn alpha_sigma(lambda: f64) -> Result<AlphaSigma> {
    check_lambda(lambda)?;
    Ok(AlphaSigma { alpha: libm::sqrt(sigmoid(lambda)), sigma: libm::sqrt(sigmoid(-lambda)) })
}

/// A frame stack produced by the forward process, tagged with the log-SNR of
/// every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyVideo<T> {
    pub z: Tensor<T>,
    pub per_frame_log_snr: Vec<f64>,
}

fn affine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64, what: &str) -> Result<Tensor<T>> {
    a.ensure_same_shape(b, what)?;
    a.zip_map(b, |x, y| T::from_f64_lossy(ca * x.as_f64() + cb * y.as_f64()))
}

/// `z = alpha * x + sigma * noise` at log-SNR `lambda`.
pub fn forward_at<T: Scalar>(x: &Tensor<T>, lambda: f64, noise: &Tensor<T>) -> Result<NoisyVideo<T>> {
    let AlphaSigma { alpha, sigma } = alpha_sigma(lambda)?;
    let z = affine(x, alpha, noise, sigma, "forward_sample x vs noise")?;
    let frames = x.shape().first().copied().unwrap_or(0);
    Ok(NoisyVideo { z, per_frame_log_snr: alloc::vec![lambda; frames] })
}

pub fn forward_sample<T: Scalar>(
    x: &Tensor<T>,
    t: f64,
    noise: &Tensor<T>,
    schedule: &LogSnrSchedule,
) -> Result<NoisyVideo<T>> {
    forward_at(x, schedule.log_snr(t)?, noise)
}

/// `v = alpha * eps - sigma * x`.
pub fn v_target<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let AlphaSigma { alpha, sigma } = alpha_sigma(lambda)?;
    affine(eps, alpha, x, -sigma, "v_target eps vs x")
}

/// Clean estimate `x = alpha * z - sigma * v`.
pub fn x_from_v<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let AlphaSigma { alpha, sigma } = alpha_sigma(lambda)?;
    affine(z, alpha, v, -sigma, "x_from_v z vs v")
}

/// Noise estimate `eps = sigma * z + alpha * v`.
pub fn eps_from_v<T: Scalar>(z: &Tensor<T>, v: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    let AlphaSigma { alpha, sigma } = alpha_sigma(lambda)?;
    affine(z, sigma, v, alpha, "eps_from_v z vs v")
}

/// `exp(lambda / 2)`, the factor turning the x-space L1 error into an
/// eps-space error.
pub fn loss_weight(lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let w = libm::exp(0.5 * lambda);
    if w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Domain(format!("loss weight overflows at lambda = {lambda}")))
    }
}

/// Coefficients of the Gaussian posterior `q(z_s | z_t, x)` for `lambda_s > lambda_t`:
/// mean `= coef_z * z_t + coef_x * x`, standard deviation `std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub coef_z: f64,
    pub coef_x: f64,
    pub std: f64,
}

pub fn posterior(lambda_t: f64, lambda_s: f64) -> Result<Posterior> {
    check_lambda(lambda_t)?;
    check_lambda(lambda_s)?;
    if lambda_s <= lambda_t {
        return Err(Error::Domain(format!(
            "posterior needs lambda_s > lambda_t, got {lambda_s} <= {lambda_t}"
        )));
    }
    let at = alpha_sigma(lambda_t)?;
    let as_ = alpha_sigma(lambda_s)?;
    // sigma_{t|s}^2 = sigma_t^2 (1 - e^{lambda_t - lambda_s})
    let keep = -libm::expm1(lambda_t - lambda_s);
    let coef_z = (at.alpha / as_.alpha) * (as_.sigma * as_.sigma) / (at.sigma * at.sigma);
    let coef_x = as_.alpha * keep;
    let var = as_.sigma * as_.sigma * keep;
    Ok(Posterior { coef_z, coef_x, std: libm::sqrt(var) })
}

/// One ancestral transition from time `t` to time `s < t`. At `s = 0` only the
/// posterior mean is returned and `noise` may be `None`.
pub fn ancestral_step<T: Scalar>(
    z_t: &Tensor<T>,
    x_hat: &Tensor<T>,
    t: f64,
    s: f64,
    noise: Option<&Tensor<T>>,
    schedule: &LogSnrSchedule,
) -> Result<Tensor<T>> {
    if s >= t {
        return Err(Error::Ordering { s, t });
    }
    let post = posterior(schedule.log_snr(t)?, schedule.log_snr(s)?)?;
    let mean = affine(z_t, post.coef_z, x_hat, post.coef_x, "ancestral z_t vs x_hat")?;
    if s == 0.0 {
        return Ok(mean);
    }
    let noise = noise.ok_or_else(|| Error::Domain(format!("ancestral step to s = {s} needs noise")))?;
    affine(&mean, 1.0, noise, post.std, "ancestral mean vs noise")
}

/// Sampling times `1, (N-1)/N, ..., 0` for `steps = N`.
pub fn time_grid(steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    Ok((0..=steps).rev().map(|i| i as f64 / steps as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, stream};
    use rand::Rng;
    use core::f64::consts::FRAC_1_SQRT_2;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::full(&[1], v)
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LogSnrSchedule::default();
        assert!((s.log_snr(0.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((s.log_snr(1.0).unwrap() + 20.0).abs() < 1e-9);
        assert!(s.log_snr(0.5).unwrap().abs() < 1e-9);
    }

    #[test]
    fn schedule_rejects_out_of_range() {
        let s = LogSnrSchedule::default();
        assert!(matches!(s.log_snr(-0.01), Err(Error::Domain(_))));
        assert!(matches!(s.log_snr(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.log_snr(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = LogSnrSchedule::default();
        let n = 10_000;
        let mut prev = s.log_snr(0.0).unwrap();
        for i in 1..=n {
            let cur = s.log_snr(i as f64 / n as f64).unwrap();
            assert!(cur < prev, "not decreasing at {i}");
            prev = cur;
        }
    }

    #[test]
    fn alpha_sigma_values() {
        let a = alpha_sigma(0.0).unwrap();
        assert!((a.alpha - FRAC_1_SQRT_2).abs() < 1e-7 && (a.sigma - FRAC_1_SQRT_2).abs() < 1e-7);
        let a = alpha_sigma(38.0).unwrap();
        assert!((a.alpha - 1.0).abs() < 1e-8 && a.sigma < 1e-8);
        // sqrt(sigmoid(+-2)) evaluated at 30 digits with mpmath
        let a = alpha_sigma(2.0).unwrap();
        assert!((a.alpha - 0.938_507_899_795_138_9).abs() < 1e-12);
        assert!((a.sigma - 0.345_257_761_711_619_7).abs() < 1e-12);
        assert!(alpha_sigma(f64::INFINITY).is_err());
    }

    #[test]
    fn alpha_sigma_unit_norm_on_grid() {
        for i in 0..=10_000 {
            let l = -20.0 + 40.0 * i as f64 / 10_000.0;
            let a = alpha_sigma(l).unwrap();
            assert!((a.alpha * a.alpha + a.sigma * a.sigma - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_examples() {
        let z = forward_at(&scalar(1.0), 0.0, &scalar(0.0)).unwrap();
        assert!((z.z.data()[0] - FRAC_1_SQRT_2).abs() < 1e-7);
        let s = LogSnrSchedule::default();
        let mut rng = stream(1, 2);
        let x: Tensor<f64> = gaussian(&mut rng, &[3, 3, 4, 4]);
        let n: Tensor<f64> = gaussian(&mut rng, &[3, 3, 4, 4]);
        // at lambda = 20 the signal scale is 1 - 1e-9 but sigma is still 4.54e-5
        let z = forward_sample(&x, 0.0, &Tensor::zeros(&[3, 3, 4, 4]), &s).unwrap();
        assert!(z.z.max_abs_diff(&x) < 1e-8);
        let z = forward_sample(&x, 0.0, &n, &s).unwrap();
        let bound = 4.54e-5 * n.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1e-8;
        assert!(z.z.max_abs_diff(&x) <= bound);
        assert_eq!(z.per_frame_log_snr, alloc::vec![s.log_snr(0.0).unwrap(); 3]);
        let bad: Tensor<f64> = Tensor::zeros(&[2, 3, 4, 4]);
        assert!(matches!(forward_sample(&x, 0.3, &bad, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_monte_carlo_moments() {
        let n = 100_000;
        let mut rng = stream(7, 0);
        let x = 0.4;
        let noise: Tensor<f64> = gaussian(&mut rng, &[n]);
        let z = forward_at(&Tensor::full(&[n], x), 0.0, &noise).unwrap();
        let mean = z.z.data().iter().sum::<f64>() / n as f64;
        let var = z.z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let a = alpha_sigma(0.0).unwrap();
        let se_mean = a.sigma / libm::sqrt(n as f64);
        assert!((mean - a.alpha * x).abs() < 3.0 * se_mean);
        // std of the sample std for Gaussian data ~ sigma / sqrt(2n)
        let se_std = a.sigma / libm::sqrt(2.0 * n as f64);
        assert!((libm::sqrt(var) - a.sigma).abs() < 3.0 * se_std);
    }

    #[test]
    fn v_and_inverse_examples() {
        let v = v_target(&scalar(1.0), &scalar(0.0), 0.0).unwrap();
        assert!((v.data()[0] + FRAC_1_SQRT_2).abs() < 1e-7);
        let v = v_target(&scalar(0.0), &scalar(1.0), 0.0).unwrap();
        assert!((v.data()[0] - FRAC_1_SQRT_2).abs() < 1e-7);

        let z = forward_at(&scalar(1.0), 0.0, &scalar(0.0)).unwrap().z;
        let v = v_target(&scalar(1.0), &scalar(0.0), 0.0).unwrap();
        assert!((x_from_v(&z, &v, 0.0).unwrap().data()[0] - 1.0).abs() < 1e-12);

        let z = scalar(0.37);
        assert!((x_from_v(&z, &scalar(0.0), 60.0).unwrap().data()[0] - 0.37).abs() < 1e-12);
        assert!((eps_from_v(&scalar(0.0), &scalar(1.0), 0.0).unwrap().data()[0] - FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(x_from_v(&scalar(0.0), &Tensor::zeros(&[2]), 0.0), Err(Error::Shape(_))));
        assert!(matches!(eps_from_v(&scalar(0.0), &Tensor::zeros(&[2]), 0.0), Err(Error::Shape(_))));
        assert!(matches!(v_target(&scalar(0.0), &Tensor::zeros(&[2]), 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn x_from_v_matches_eps_route() {
        let mut rng = stream(3, 3);
        for _ in 0..200 {
            let lambda = rng.random_range(-20.0..20.0);
            let x: Tensor<f64> = gaussian(&mut rng, &[16]);
            let e: Tensor<f64> = gaussian(&mut rng, &[16]);
            let z = forward_at(&x, lambda, &e).unwrap().z;
            let v: Tensor<f64> = gaussian(&mut rng, &[16]);
            let direct = x_from_v(&z, &v, lambda).unwrap();
            let eps = eps_from_v(&z, &v, lambda).unwrap();
            let AlphaSigma { alpha, sigma } = alpha_sigma(lambda).unwrap();
            let via_eps = z.zip_map(&eps, |zz, ee| (zz - sigma * ee) / alpha).unwrap();
            for (a, b) in direct.data().iter().zip(via_eps.data()) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "lambda {lambda}");
            }
        }
    }

    #[test]
    fn loss_weight_values() {
        assert!((loss_weight(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((loss_weight(2.0).unwrap() - core::f64::consts::E).abs() < 1e-12);
        assert!((loss_weight(-20.0).unwrap() - 4.539_992_976e-5).abs() < 1e-12);
        assert!((loss_weight(20.0).unwrap() - 22_026.465_794_806_718).abs() < 1e-8);
        assert!(loss_weight(f64::NAN).is_err());
    }

    #[test]
    fn ancestral_limits() {
        let s = LogSnrSchedule::default();
        let z = scalar(0.3);
        let x = scalar(-0.8);
        let n = scalar(0.0);
        let near = ancestral_step(&z, &x, 0.6, 0.6 - 1e-9, Some(&n), &s).unwrap();
        assert!((near.data()[0] - 0.3).abs() < 1e-6);
        let end = ancestral_step(&z, &x, 0.6, 0.0, None, &s).unwrap();
        assert!((end.data()[0] + 0.8).abs() < 1e-6);
        assert!(matches!(
            ancestral_step(&z, &x, 0.5, 0.5, Some(&n), &s),
            Err(Error::Ordering { .. })
        ));
        assert!(ancestral_step(&z, &x, 0.5, 0.2, None, &s).is_err());
    }

    /// Brute-force conditioning oracle: draw (x, z_s, z_t) from the joint
    /// forward process with x fixed, keep draws whose z_t lands in a thin bin
    /// around the observed value and compare the empirical mean/std of z_s.
    #[test]
    fn ancestral_posterior_matches_gaussian_conditioning() {
        let (lt, ls, zt_obs, x0) = (0.0, 2.0, 0.5, 1.0);
        let post = posterior(lt, ls).unwrap();
        let oracle_mean = post.coef_z * zt_obs + post.coef_x * x0;

        let as_ = alpha_sigma(ls).unwrap();
        let at = alpha_sigma(lt).unwrap();
        let a_ts = at.alpha / as_.alpha;
        let s_ts = libm::sqrt(at.sigma * at.sigma - a_ts * a_ts * as_.sigma * as_.sigma);
        let mut rng = stream(11, 0);
        let (mut n, mut sum, mut sum2) = (0usize, 0.0, 0.0);
        let half_bin = 0.01;
        while n < 20_000 {
            let e1: f64 = gaussian::<f64, _>(&mut rng, &[1]).data()[0];
            let e2: f64 = gaussian::<f64, _>(&mut rng, &[1]).data()[0];
            let zs = as_.alpha * x0 + as_.sigma * e1;
            let zt = a_ts * zs + s_ts * e2;
            if (zt - zt_obs).abs() < half_bin {
                n += 1;
                sum += zs;
                sum2 += zs * zs;
            }
        }
        let mean = sum / n as f64;
        let std = libm::sqrt(sum2 / n as f64 - mean * mean);
        let se = post.std / libm::sqrt(n as f64);
        // the finite bin adds a bias of order coef_z * half_bin^2, far below se
        assert!((mean - oracle_mean).abs() < 4.0 * se, "mean {mean} vs {oracle_mean}");
        assert!((std - post.std).abs() < 0.02 * post.std, "std {std} vs {}", post.std);
    }

    #[test]
    fn time_grid_uniform() {
        let g = time_grid(4).unwrap();
        assert_eq!(g, alloc::vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(time_grid(0).is_err());
    }
}
