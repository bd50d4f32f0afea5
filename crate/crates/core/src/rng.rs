//! Seed derivation.
//!
//! Every run owns a single root seed; all randomness flows from it through
//! named sub-streams so that individual phases (data generation, training,
//! sampling, anchor corruption) are independently reproducible. Stream
//! derivation is a fixed algorithm, never `std` hashing, so streams are
//! stable across platforms and compiler versions.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-stream noise for dataset generation.
pub const STREAM_DATA: &str = "data";
/// Sub-stream for the training loop (batches, timestamps, drops, noise).
pub const STREAM_TRAIN: &str = "train";
/// Sub-stream for rollout window noise.
pub const STREAM_SAMPLE: &str = "sample";
/// Sub-stream for anchor corruption at sampling time.
pub const STREAM_JDC: &str = "jdc";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic generator for sub-stream `name` with a per-use `index`
/// (episode number, window start, seed slot, ...).
pub fn stream(root_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let tag = fnv1a(name.as_bytes());
    let mut seed = [0u8; 32];
    let words = [
        splitmix(root_seed ^ tag),
        splitmix(root_seed.wrapping_add(tag)),
        splitmix(index ^ tag.rotate_left(17)),
        splitmix(root_seed ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d)),
    ];
    for (i, w) in words.iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
