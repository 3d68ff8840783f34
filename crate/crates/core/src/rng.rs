//! Keyed random streams.
//!
//! Every stochastic component derives its generator from a master seed and a
//! tuple of integer keys (image, run, step, instance, ...). Draws are
//! therefore independent of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::OffsetVec;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of keys into a single 64-bit stream id.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// A ChaCha8 generator for the stream identified by `(seed, keys)`.
pub fn keyed(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, keys))
}

/// One isotropic 2-D Gaussian draw with per-axis standard deviation `sigma`.
pub fn gaussian2<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64) -> OffsetVec {
    let dx: f64 = StandardNormal.sample(rng);
    let dy: f64 = StandardNormal.sample(rng);
    OffsetVec::new(sigma * dx, sigma * dy)
}
