//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed by the master seed plus a tuple of labels, so results do
//! not depend on call order across prompts or threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels.
pub mod tag {
    pub const SAMPLE: u64 = 0x5341_4d50;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const JUDGE: u64 = 0x4a55_4447;
    pub const SCENARIO: u64 = 0x5343_454e;
    pub const REWARD_MODEL: u64 = 0x5257_4d44;
    pub const SWEEP: u64 = 0x5357_4550;
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix64(master), |acc, &label| mix64(acc ^ mix64(label)))
}

pub fn stream(master: u64, labels: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, labels))
}
