//! Seeded randomness. Every stochastic routine takes an explicit generator so
//! that results are a pure function of the seeds handed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

pub type VidimRng = ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates neighbouring seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> VidimRng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(v)
    })
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
