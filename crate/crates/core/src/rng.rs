//! Seed derivation and the crate-wide RNG type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags keep derived seeds for different consumers apart.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const CLIENT_MASK: u64 = 4;
    pub const SERVER_MASK: u64 = 5;
    pub const INIT: u64 = 6;
    pub const CLIENT_TRAIN: u64 = 7;
    pub const PARTICIPATION: u64 = 8;
    pub const GRADCHECK: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of tags into an independent sub-seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
