//! Seeded randomness. Every stream is a ChaCha8 generator keyed by a 64-bit
//! seed, and sub-streams are derived by hashing so results never depend on
//! iteration order or worker count.

use alloc::vec::Vec;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed for sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    xxhash_rust::xxh3::xxh3_64_with_seed(&stream.to_le_bytes(), base)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn substream(base: u64, stream: u64) -> Rng {
    rng_from_seed(derive_seed(base, stream))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform draw from `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    rand::Rng::random::<f64>(rng)
}
