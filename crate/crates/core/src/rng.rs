//! Seeded randomness helpers.
//!
//! Every stochastic step in the pipeline draws from a [`ChaCha8Rng`] created
//! from an explicit `u64` seed, so identical seeds give identical results on
//! any platform. Sub-seeds for independent stages are derived with a
//! splitmix64 mix of (seed, stream id) rather than reusing one stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A deterministic generator for the given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed for a named stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed).wrapping_add(stream))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
