//! Deterministic randomness.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream seeded by a
//! documented mix of `(base_seed, index, step)`, so any individual example or
//! training step can be reproduced in isolation, bit-for-bit, regardless of
//! how many other draws happened before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Decorrelates consecutive indices.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with two stream coordinates (example index, step index).
///
/// `mix64(s, i, k)` chains one SplitMix64 round per coordinate, so streams
/// differing in any coordinate are independent for practical purposes.
pub fn mix64(base_seed: u64, index: u64, step: u64) -> u64 {
    let a = splitmix64(base_seed ^ 0xa076_1d64_78bd_642f);
    let b = splitmix64(a ^ index);
    splitmix64(b ^ step.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

/// Stream for a derived purpose named by `(index, step)`.
pub fn stream(base_seed: u64, index: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(base_seed, index, step))
}

/// Reserved step id for the generation-noise draw of an example.
pub const STEP_GENERATION: u64 = 0;

/// Step ids for optimizer-time noise start here; iteration k uses `k + 1`
/// so it never collides with the generation draw.
pub fn step_noise(iter: usize) -> u64 {
    iter as u64 + 1
}
