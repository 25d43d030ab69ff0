//! Seed derivation for the counter-based generators used everywhere.
//!
//! Every random decision draws from a ChaCha stream whose key is derived from
//! a base seed and a textual label, so adding or reordering draws in one
//! component never shifts the stream seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the base.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(base ^ splitmix(h))
}

/// Derive a child seed from `base`, a label and an index.
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix(derive_seed(base, label) ^ splitmix(index.wrapping_add(1)))
}

pub fn stream(base: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label))
}

pub fn indexed_stream(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(base, label, index))
}
