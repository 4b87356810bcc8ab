//! Seeded random streams. Every random draw in the toolkit flows from a
//! [`Rng`] built with [`seeded`], so runs are reproducible bit for bit.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Real;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream, e.g. one per model or per utterance.
pub fn fork(rng: &mut Rng, salt: u64) -> Rng {
    let base: u64 = rng.random();
    ChaCha8Rng::seed_from_u64(base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn uniform<T: Real>(rng: &mut Rng, lo: f64, hi: f64) -> T {
    T::of(lo + (hi - lo) * rng.random::<f64>())
}

pub fn normal<T: Real>(rng: &mut Rng, mean: f64, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::of(mean + std * z)
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn unit(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}
