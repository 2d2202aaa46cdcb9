//! Labeled seed derivation: every random stream is fanned out from one root
//! seed, so components can be rerun in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `sha256(root_le_bytes || label)`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn derived_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_eq!(derive_seed(1, "corpus"), derive_seed(1, "corpus"));
        assert_ne!(derive_seed(1, "corpus"), derive_seed(1, "tune"));
        assert_ne!(derive_seed(1, "corpus"), derive_seed(2, "corpus"));
    }
}
