//! Seed derivation.
//!
//! Every run has one seed. Components that need their own random stream
//! derive it as the first eight bytes (little-endian) of
//! `SHA-256(run_seed as u64 LE || role as UTF-8)`. Random streams are
//! ChaCha20 (`rand_chacha::ChaCha20Rng::seed_from_u64`).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a sub-seed for `role` from `seed`.
pub fn derive_seed(seed: u64, role: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(role.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A ChaCha20 stream for `role` under `seed`.
pub fn rng_for(seed: u64, role: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, role))
}
