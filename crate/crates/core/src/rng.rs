//! Deterministic random substreams.
//!
//! Every stochastic step derives its own generator from a master seed and a
//! tag path such as `(stage, iteration, sample index)`. Work can then be
//! spread over any number of threads without changing a single draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a path of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_F42D))))
}

pub fn substream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stable small integer tags for the stages that draw randomness.
pub mod tag {
    pub const RULE: u64 = 1;
    pub const DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SFT: u64 = 4;
    pub const GRPO: u64 = 5;
    pub const GRPO_ADV: u64 = 6;
    pub const KL: u64 = 7;
    pub const SMOOTH_PRED: u64 = 8;
    pub const SMOOTH_CERT: u64 = 9;
    pub const SMOOTH_ATTACK: u64 = 10;
    pub const SPLIT: u64 = 11;
}
