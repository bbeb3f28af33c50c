//! Seed fan-out.
//!
//! Every source of randomness in the crate is a `ChaCha8Rng` derived from a
//! master seed plus a purpose label and optional indices (round, client id,
//! trial number, ...). Streams for different labels are independent, so
//! enabling or disabling one consumer never perturbs another, and work items
//! seeded this way can run in any order or in parallel with identical
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(master: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(label.as_bytes());
    hasher.update([0x00]);
    for index in indices {
        hasher.update(index.to_le_bytes());
    }
    hasher.finalize().into()
}

/// A dedicated RNG stream for `(master, label, indices)`.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(master, label, indices))
}

/// A derived 64-bit seed for APIs that take a seed rather than an RNG.
pub fn derive(master: u64, label: &str, indices: &[u64]) -> u64 {
    let bytes = digest(master, label, indices);
    u64::from_le_bytes(bytes[..8].try_into().expect("digest is 32 bytes"))
}
