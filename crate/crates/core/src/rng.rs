//! Seed derivation.
//!
//! Every random stream in the project is derived from a single root seed by
//! hashing (root, domain label, index) into a ChaCha8 key. Streams for
//! different components never overlap and re-deriving with the same inputs
//! always yields the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a root seed, a component label,
/// and a per-item counter.
pub fn derive_rng(root: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Fold two seeds into one, for contexts keyed by more than one id
/// (e.g. a driver profile seed combined with an episode seed).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(a.to_le_bytes());
    hasher.update(b.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
