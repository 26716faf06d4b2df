use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;

/// Discrete prompt identity `z ∈ [0, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptId(pub usize);

impl PromptId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for PromptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Prompt-conditioned toy data: `p(x_0 | z) = N(μ_z, σ² I)`, uniform `p(z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataModel {
    means: Vec<Vec<f64>>,
    sigma: f64,
}

impl ToyDataModel {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Config("toy data needs at least one prompt".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("prompt means must share a non-zero dimension".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("data sigma must be > 0, got {sigma}")));
        }
        for (a, ma) in means.iter().enumerate() {
            for mb in &means[a + 1..] {
                if ma == mb {
                    return Err(Error::Config("prompt means must be pairwise distinct".into()));
                }
            }
        }
        Ok(Self { means, sigma })
    }

    /// `K` means evenly spaced on a circle of `radius` in the first two
    /// coordinates (remaining coordinates zero).
    pub fn on_circle(dim: usize, prompts: usize, radius: f64, sigma: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("circle layout needs dim >= 2".into()));
        }
        let means = (0..prompts)
            .map(|z| {
                let angle = std::f64::consts::TAU * z as f64 / prompts as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect();
        Self::new(means, sigma)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn prompts(&self) -> usize {
        self.means.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self, z: PromptId) -> &[f64] {
        &self.means[z.0]
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn check_prompt(&self, z: PromptId) -> Result<()> {
        if z.0 >= self.prompts() {
            return Err(Error::Invalid(format!("prompt {z} outside [0, {})", self.prompts())));
        }
        Ok(())
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> PromptId {
        PromptId(rng.random_range(0..self.prompts()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: PromptId, rng: &mut R) -> Vec<f64> {
        standard_normal_vec(rng, self.dim())
            .into_iter()
            .zip(self.mean(z))
            .map(|(e, m)| m + self.sigma * e)
            .collect()
    }
}
