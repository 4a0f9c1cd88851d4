//! Seed plumbing. Every random stream in a run is derived from one root seed
//! and a label, so adding a new consumer never shifts the streams of others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `root` and a textual label.
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Same as [`derive`] with an additional integer index (iteration, sample, ...).
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    derive(derive(root, label), &index.to_string())
}

pub fn rng(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(root, label))
}

pub fn rng_indexed(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(root, label, index))
}
