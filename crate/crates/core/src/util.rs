//! Hashing and deterministic RNG derivation helpers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Derive a child RNG from a root seed and a label path.
///
/// Every place that needs randomness derives its own stream this way, so
/// adding or reordering consumers (or splitting work across threads) never
/// perturbs another stream. The seed is the SHA-256 of the root seed's LE
/// bytes followed by each label.
pub fn derive_rng(root_seed: u64, labels: &[&str]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    for label in labels {
        hasher.update([0xff]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Derive a child RNG keyed by integers (generation and offspring index
/// during search) rather than labels.
pub fn derive_rng_indexed(root_seed: u64, label: &str, indices: &[u64]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(label.as_bytes());
    for ix in indices {
        hasher.update([0xfe]);
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}
