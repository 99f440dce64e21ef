//! Seed derivation and deterministic RNG construction.
//!
//! Every stochastic stage takes a 64-bit seed and derives independent
//! streams from it, so pipelines replay bit-exactly for a fixed seed
//! regardless of thread count or evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seed values.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed for a named/numbered stream.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x51_7c_c1_b7_27_22_0a_95)))
}

/// Deterministic RNG for a seed. ChaCha8 keeps the stream stable across
/// platforms and library versions.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
