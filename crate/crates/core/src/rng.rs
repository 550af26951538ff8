//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own stream, derived from a master seed
//! and a list of integer labels (sample index, iteration, purpose tag, ...). The
//! derivation folds each label into the state with the SplitMix64 finalizer, so
//! streams for different label paths are statistically independent and do not
//! depend on the order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Purpose tags mixed into stream derivations.
pub mod tag {
    pub const SCENE: u64 = 0x5343_454e;
    pub const PAIR: u64 = 0x5041_4952;
    pub const CAPTION: u64 = 0x4341_5054;
    pub const INIT: u64 = 0x494e_4954;
    pub const TRAIN: u64 = 0x5452_4149;
    pub const INFER: u64 = 0x494e_4652;
    pub const SPLIT: u64 = 0x5350_4c54;
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `labels` into `seed`, one SplitMix64 round per label.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

/// Stable 64-bit label for a string id (FNV-1a).
pub fn label_of(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn standard_normal(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_label_sensitive() {
        let a: u64 = stream(42, &[1, 2]).random();
        let b: u64 = stream(42, &[1, 2]).random();
        let c: u64 = stream(42, &[2, 1]).random();
        let d: u64 = stream(43, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn string_labels_differ() {
        assert_ne!(label_of("pair-0000a"), label_of("pair-0000b"));
        assert_eq!(label_of(""), 0xcbf2_9ce4_8422_2325);
    }
}
