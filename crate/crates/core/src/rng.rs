//! Seed fan-out.
//!
//! Every random draw in the toolkit flows from one experiment seed. Components
//! derive their own generator from `(seed, label)` so that, for example, the
//! shuffle order of epoch 3 does not depend on how many layers were initialized
//! before it. Labels are free-form strings like `"world/weights/2"` or
//! `"shuffle/0"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic generator for the given seed and stream label.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
