//! Deterministic RNG substreams.
//!
//! All randomness in a run flows from one master seed through named
//! substreams, so each stage (split, corrupt, init, sampling, shuffling)
//! is reproducible on its own and resume replays the exact stream a
//! straight run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for `(seed, stage)`.
pub fn substream(seed: u64, stage: &str) -> ChaCha8Rng {
    substream_n(seed, stage, 0)
}

/// RNG for `(seed, stage, index)` — e.g. per epoch or per step.
pub fn substream_n(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(stage.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// A plain u64 seed for `(seed, stage, index)`, for APIs that take seeds.
pub fn subseed(seed: u64, stage: &str, index: u64) -> u64 {
    fnv1a(&{
        let mut buf = Vec::with_capacity(stage.len() + 16);
        buf.extend_from_slice(&seed.to_le_bytes());
        buf.extend_from_slice(stage.as_bytes());
        buf.extend_from_slice(&index.to_le_bytes());
        buf
    })
}
