//! Named, counter-based random substreams.
//!
//! A substream seed is a pure function of `(root seed, label, index)`, so a
//! trial, an epoch shuffle or a candidate gets the same numbers whether it
//! runs first, last, serially or on another thread.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed of substream `label:index` under `root`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    mix64(mix64(root ^ fnv1a(label)).wrapping_add(mix64(index)))
}

/// Generator for substream `label:index` under `root`.
pub fn stream(root: u64, label: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, label, index))
}
