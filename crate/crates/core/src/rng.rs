//! Seedable RNG plumbing shared by every stochastic stage.
//!
//! Each pipeline stage derives its own stream from a base seed and a string
//! tag so that reordering stages or adding new ones never shifts another
//! stage's random sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a base seed with a stage tag into an independent sub-seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    // FNV-1a over the tag bytes, then splitmix64 to spread the bits.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The deterministic RNG used throughout the crate.
pub fn rng_for(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "embed"), derive_seed(7, "embed"));
        assert_ne!(derive_seed(7, "embed"), derive_seed(7, "fit"));
        assert_ne!(derive_seed(7, "embed"), derive_seed(8, "embed"));
    }
}
