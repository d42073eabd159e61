//! Deterministic RNG substreams.
//!
//! Every source of randomness in the lab hangs off a single root seed. Named
//! substreams (`data`, `init`, `training`, per-clip, per-row) are derived by
//! hashing the stream name into the root, so adding a new consumer never
//! perturbs the draws of an existing one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a over the stream name. Not cryptographic; only has to
/// be deterministic across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the seed for a named substream of `root`.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ root.rotate_left(17)
}

/// RNG for a named substream of `root`.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

/// RNG for an indexed member of a substream family (clip k, ablation row k).
pub fn substream_indexed(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
