//! Keyed deterministic randomness.
//!
//! Every random draw in the pipeline comes from a generator seeded by a key
//! `(global seed, purpose, indices...)`, so results do not depend on the order in
//! which samples are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a seed, a purpose tag and any number of indices into one 64-bit key.
pub fn derive_key(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for b in purpose.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i));
    }
    h
}

pub fn keyed_rng(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, purpose, indices))
}
