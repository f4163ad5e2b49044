//! Derivation of independent, reproducible RNG streams.
//!
//! Every random draw in the crate comes from a ChaCha12 stream keyed by
//! `(seed, index, tag)`. Episodes, Monte Carlo trials, and training epochs
//! each get their own stream, so any unit of work is reproducible in
//! isolation and safe to evaluate in parallel.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const TAG_EPISODE: u64 = 1;
pub const TAG_DISTRACTOR: u64 = 2;
pub const TAG_SYNTH: u64 = 3;
pub const TAG_TRAIN: u64 = 4;
pub const TAG_MC: u64 = 5;
pub const TAG_INIT: u64 = 6;

/// SplitMix64 finalizer; distinct inputs map to well-separated outputs.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, index, tag)`.
pub fn stream_rng(seed: u64, index: u64, tag: u64) -> ChaCha12Rng {
    let a = mix64(seed);
    let b = mix64(a ^ index);
    let c = mix64(b ^ tag);
    let d = mix64(c ^ seed.rotate_left(32) ^ index.rotate_left(16));
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha12Rng::from_seed(key)
}
