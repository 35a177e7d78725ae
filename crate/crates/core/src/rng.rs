//! Deterministic RNG stream derivation.
//!
//! Every randomized stage (phantom geometry, weight init, shuffling,
//! augmentation, dropout, bootstrap replicates) gets its own ChaCha8
//! stream derived from a user seed and a purpose tag. Streams derived
//! from distinct (seed, tag) pairs are statistically independent, and
//! consuming one stream never advances another, so adding draws to one
//! stage cannot perturb the rest of the pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with a stream tag into a new seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag))
}

/// Combine a base seed with two tags (e.g. purpose and index).
pub fn derive2(seed: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive(derive(seed, tag_a), tag_b)
}

/// Fresh ChaCha8 stream for (seed, tag).
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Fresh ChaCha8 stream for (seed, tag_a, tag_b).
pub fn stream2(seed: u64, tag_a: u64, tag_b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive2(seed, tag_a, tag_b))
}

/// Stream tags used across the crate. Centralized so two stages can
/// never collide by picking the same ad-hoc constant.
pub mod tags {
    pub const PHANTOM_PATIENT: u64 = 0x01;
    pub const MODEL_INIT: u64 = 0x02;
    pub const DATA_SPLIT: u64 = 0x03;
    pub const EPOCH_SHUFFLE: u64 = 0x04;
    pub const EPOCH_POSITIONS: u64 = 0x05;
    pub const AUGMENT: u64 = 0x06;
    pub const DROPOUT: u64 = 0x07;
    pub const BOOTSTRAP_REPLICATE: u64 = 0x08;
    pub const KFOLD: u64 = 0x09;
    pub const GRAD_CHECK: u64 = 0x0a;
    pub const PHANTOM_NOISE: u64 = 0x0b;
}
