//! Labeled, counter-based random streams.
//!
//! A [`SeedTree`] node is a 256-bit key derived from a root seed and a path
//! of labels. Each node hands out independent ChaCha8 streams indexed by an
//! integer (cycle number, sample index...), so results never depend on the
//! order in which work items are evaluated or on the worker count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedTree {
    key: [u8; 32],
}

impl SeedTree {
    pub fn new(root_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"darktrap-root");
        h.update(root_seed.to_le_bytes());
        SeedTree { key: h.finalize().into() }
    }

    /// Child node for `label`; adding a new label never perturbs siblings.
    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        SeedTree { key: h.finalize().into() }
    }

    pub fn child_indexed(&self, label: &str, index: u64) -> Self {
        self.child(&format!("{label}#{index}"))
    }

    /// Stream `index` of this node.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }

    /// Standard normal deviate number `index` of stream `stream`, computed
    /// by seeking rather than by drawing the preceding values.
    pub fn normal_at(&self, stream: u64, index: u64) -> f64 {
        let mut rng = self.stream(stream);
        rng.set_word_pos(index as u128 * 4);
        let a: u64 = rng.next_u64();
        let b: u64 = rng.next_u64();
        // Box-Muller on (0, 1] × [0, 1)
        let u1 = ((a >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// A 64-bit seed summarizing this node, for manifests and legacy APIs.
    pub fn fingerprint(&self) -> u64 {
        u64::from_le_bytes(self.key[..8].try_into().expect("8 bytes"))
    }
}
