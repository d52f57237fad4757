//! Counter-based randomness.
//!
//! Every shared random matrix entry is a pure function of
//! `(seed, role tag, row, col)`, so matrices can be regenerated from their
//! seed on any machine, in any order and on any number of threads. Only
//! integer mixing and the `libm` software math routines are used, which
//! keeps the output bit-identical across platforms.
//!
//! Per-actor sequential streams (stochastic rounding, data synthesis,
//! minibatch sampling) use ChaCha8 seeded through [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags keep matrices derived from the same seed independent.
pub mod tag {
    pub const OMEGA: u64 = 0x4f4d_4547;
    pub const COMBINER: u64 = 0x434f_4d42;
    pub const INIT: u64 = 0x494e_4954;
    pub const LAYER_SEED: u64 = 0x5345_4544;
    pub const STREAM: u64 = 0x5354_524d;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn key(seed: u64, tag: u64, row: u64, col: u64) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    h = mix64(h ^ tag.wrapping_mul(GOLDEN));
    h = mix64(h ^ row.wrapping_add(1).wrapping_mul(0xd6e8_feb8_6659_fd93));
    mix64(h ^ col.wrapping_add(1).wrapping_mul(0xa076_1d64_78bd_642f))
}

/// Uniform in (0, 1], 53-bit resolution.
#[inline]
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sample addressed by `(seed, tag, row, col)` (Box-Muller).
pub fn counter_normal(seed: u64, tag: u64, row: u64, col: u64) -> f64 {
    let k = key(seed, tag, row, col);
    let u1 = unit_open(mix64(k ^ 0x5555_5555_5555_5555));
    let u2 = unit_open(mix64(k ^ 0xaaaa_aaaa_aaaa_aaaa));
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Derive a child seed from a parent seed and a path of labels.
pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter().enumerate().fold(mix64(parent ^ tag::STREAM), |h, (i, &p)| key(h, tag::STREAM, i as u64, p))
}

/// A ChaCha8 stream for one actor, keyed by a label path.
pub fn stream(parent: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, path))
}
