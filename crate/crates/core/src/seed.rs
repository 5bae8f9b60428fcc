//! Sub-stream seed derivation.
//!
//! Every random stream of a run (weight init, data shuffling, augmentation,
//! synthetic data, mean-shift offsets) is seeded from `hash(seed, tag)`, so
//! introducing a new stream never perturbs the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const MLP_MEAN: &str = "mlp-mean";
pub const SHUFFLE: &str = "shuffle";
pub const AUGMENT: &str = "augment";
pub const DATA: &str = "synthetic-data";

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}
