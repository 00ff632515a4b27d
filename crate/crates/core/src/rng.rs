//! Seeded noise streams.
//!
//! Every stochastic operation in the crate takes an explicit `&mut R` where
//! `R: Rng` and documents how many standard normals it draws. Reproducible
//! runs derive their streams from `(seed, substream)` pairs with [`stream`],
//! so independent work items (sample indices, training steps, sweep cells)
//! never share or race on a generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Counter-based generator used for all seeded streams.
pub type NoiseRng = ChaCha20Rng;

/// Stream `substream` of the generator keyed by `seed`.
pub fn stream(seed: u64, substream: u64) -> NoiseRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(substream);
    rng
}

#[inline]
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Overwrites `out` with `out.len()` standard normals, in order.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out {
        *x = rng.sample(StandardNormal);
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    fill_normal(rng, &mut v);
    v
}
