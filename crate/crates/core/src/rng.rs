//! Deterministic RNG stream derivation.
//!
//! Every random decision in the pipeline draws from a `ChaCha8Rng` derived
//! from a user seed plus a stream tag and index. Streams are independent of
//! each other, so e.g. per-request sampling does not depend on how many
//! draws the arrival process consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a seed, a stream tag, and an index into a single 64-bit stream id.
pub fn mix(seed: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then splitmix to decorrelate nearby seeds/indices.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h ^ splitmix64(index)))
}

/// Derive an independent RNG stream from `(seed, tag, index)`.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = derive_rng(42, "request", 7).random_iter().take(4).collect();
        let b: Vec<u64> = derive_rng(42, "request", 7).random_iter().take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ_by_tag_index_and_seed() {
        let base: u64 = derive_rng(42, "request", 7).random();
        assert_ne!(base, derive_rng(42, "request", 8).random::<u64>());
        assert_ne!(base, derive_rng(42, "arrivals", 7).random::<u64>());
        assert_ne!(base, derive_rng(43, "request", 7).random::<u64>());
    }
}
