//! Seed derivation so every random draw is addressed by a tuple of tags
//! instead of by position in a shared stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

/// Stream tags used by the trainer and harness.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const VIRTUAL: u64 = 4;
    pub const HINT: u64 = 5;
    pub const EVAL_VIRTUAL: u64 = 6;
    pub const EVAL_HINT: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const EMBED: u64 = 9;
    pub const QUALITY: u64 = 10;
}
