//! Deterministic seeding.
//!
//! Every random stream in the crate comes from a ChaCha8 generator seeded
//! with a 64-bit value; sub-streams are derived from a base seed and an index
//! with SplitMix64 so that parallel tasks never share state and results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies the Gaussian generator. Part of the reproducibility contract and
/// embedded in every output.
pub const GENERATOR_VERSION: &str = "chacha8(rand_chacha 0.9)+ziggurat-normal(rand_distr 0.5)";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 finalisation step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `base`: `splitmix64(base ^ splitmix64(index))`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for base in 0..8u64 {
            for idx in 0..256u64 {
                assert!(seen.insert(derive_seed(base, idx)));
            }
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(rng_from_seed(9), |r, _: u64| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(rng_from_seed(9), |r, _: u64| Some(r.random())).collect();
        assert_eq!(a, b);
    }
}
