//! Counter-based seed derivation.
//!
//! Every random stream is keyed by the root seed plus a path of integers
//! (subject index, cluster index, epoch, ...), hashed with the SplitMix64
//! finalizer. A stream's seed never depends on how many draws another
//! stream made, so parallel generation stays reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Seed for a string key, e.g. a cluster id (FNV-1a, then mixed).
pub fn derive_seed_str(root: u64, tag: u64, key: &str) -> u64 {
    let h = key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    derive_seed(root, &[tag, h])
}

pub fn rng_for(root: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, path))
}

/// Stream tags, so different consumers of one root seed never collide.
pub mod tag {
    pub const CLUSTER: u64 = 1;
    pub const STREAMLINE: u64 = 2;
    pub const SCORE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const PAIRS: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const INIT: u64 = 7;
    pub const FOLDS: u64 = 8;
    pub const EVAL_SAMPLE: u64 = 9;
}
