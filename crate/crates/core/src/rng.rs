//! Deterministic random-stream tree.
//!
//! Every consumer of randomness draws from a named substream of a single
//! root seed. A substream's 32-byte ChaCha seed is
//! `SHA-256("adascope/v1/" + root_seed_decimal + "/" + label)`, so streams
//! are independent of evaluation order and of how work is split across
//! threads. Labels are slash-separated paths such as `pretrain`,
//! `probe/3/1` or `rollout/12/0/7`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed_bytes(&self, label: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"adascope/v1/");
        hasher.update(self.root.to_string().as_bytes());
        hasher.update(b"/");
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn stream(&self, label: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.seed_bytes(label))
    }

    /// A child tree whose root is derived from `label`.
    pub fn subtree(&self, label: &str) -> SeedTree {
        let bytes = self.seed_bytes(label);
        let mut root = [0u8; 8];
        root.copy_from_slice(&bytes[..8]);
        SeedTree::new(u64::from_le_bytes(root))
    }
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
