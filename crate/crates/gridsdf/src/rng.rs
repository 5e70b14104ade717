//! Deterministic random-number plumbing.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] seeded through
//! [`SeedSpring`], which derives child seeds by hashing the parent seed with
//! a string label and an index. Children are therefore independent of the
//! order in which sibling units run, which keeps parallel work (per-scene
//! batches, per-view ray draws) bit-reproducible regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives reproducible child seeds from a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpring {
    seed: u64,
}

impl SeedSpring {
    pub fn new(seed: u64) -> Self {
        SeedSpring { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child spring for a named sub-task (`label`) and instance (`index`).
    pub fn child(&self, label: &str, index: u64) -> SeedSpring {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0xfe]);
        h.update(label.as_bytes());
        h.update([0xfd]);
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        SeedSpring { seed: u64::from_le_bytes(bytes) }
    }

    /// Materialize the stream for this node in the seed tree.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}
