//! Deterministic RNG streams keyed by structured indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices into a single seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Fresh RNG for the stream identified by `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags used by the trainer and data modules.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const LABELED_AUG: u64 = 3;
    pub const WEAK_AUG: u64 = 4;
    pub const STRONG_AUG: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SUBSET: u64 = 7;
    pub const SYNTH: u64 = 8;
}
