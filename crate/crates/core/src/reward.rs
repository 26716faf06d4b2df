//! Synthetic reward and alignment functions plus sample-diversity metrics.

use serde::{Deserialize, Serialize};

use crate::diffusion::{PromptId, ToyDataModel};
use crate::error::{Error, Result};

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `exp(−‖x − target‖² / (2 width²))`.
pub fn target_proximity_reward(x0: &[f64], target: &[f64], width: f64) -> f64 {
    (-sq_dist(x0, target) / (2.0 * width * width)).exp()
}

/// Same kernel anchored at a pretraining mode.
pub fn alignment_score(x: &[f64], anchor: &[f64], width: f64) -> f64 {
    target_proximity_reward(x, anchor, width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSign {
    /// Rewards small samples (compressibility analog).
    Compress,
    /// Rewards large samples (incompressibility analog).
    Incompress,
}

impl NormSign {
    pub fn factor(self) -> f64 {
        match self {
            NormSign::Compress => -1.0,
            NormSign::Incompress => 1.0,
        }
    }
}

pub fn norm_reward(x0: &[f64], sign: NormSign) -> f64 {
    sign.factor() * norm(x0)
}

/// Mean pairwise Euclidean distance.
pub fn diversity_metric(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Invalid("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, x) in samples.iter().enumerate() {
        for y in &samples[a + 1..] {
            total += sq_dist(x, y).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Per-prompt target proximity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProximity {
    pub targets: Vec<Vec<f64>>,
    pub width: f64,
}

impl TargetProximity {
    /// Targets shifted from each prompt mean by a fixed `offset` vector.
    pub fn offset_from(data: &ToyDataModel, offset: &[f64], width: f64) -> Result<Self> {
        if offset.len() != data.dim() {
            return Err(Error::Config("reward offset dimension differs from data".into()));
        }
        if !(width > 0.0) {
            return Err(Error::Config(format!("reward width must be > 0, got {width}")));
        }
        let targets = data
            .means()
            .iter()
            .map(|m| m.iter().zip(offset).map(|(a, b)| a + b).collect())
            .collect();
        Ok(Self { targets, width })
    }

    pub fn score(&self, x0: &[f64], z: PromptId) -> f64 {
        target_proximity_reward(x0, &self.targets[z.0], self.width)
    }
}

/// Welford running mean / population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / (self.std() + NORMALIZATION_EPS)
    }
}

pub const NORMALIZATION_EPS: f64 = 1e-8;

/// Weighted sum of individually standardized components. Statistics are
/// updated with a whole batch before that batch is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeReward {
    components: Vec<RewardFn>,
    weights: Vec<f64>,
    stats: Vec<RunningStats>,
}

impl CompositeReward {
    pub fn new(components: Vec<RewardFn>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("composite reward needs at least one component".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::Config("one weight per composite component required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("composite weights must be nonnegative and sum to 1".into()));
        }
        let stats = vec![RunningStats::default(); components.len()];
        Ok(Self {
            components,
            weights,
            stats,
        })
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    fn combine(&self, raw: &[f64]) -> f64 {
        raw.iter()
            .zip(&self.stats)
            .zip(&self.weights)
            .map(|((v, s), w)| w * s.standardize(*v))
            .sum()
    }

    fn raw(&self, x0: &[f64], z: PromptId) -> Vec<f64> {
        self.components.iter().map(|c| c.score(x0, z)).collect()
    }

    /// Scores with the current statistics, leaving them untouched.
    pub fn score(&self, x0: &[f64], z: PromptId) -> f64 {
        self.combine(&self.raw(x0, z))
    }

    pub fn observe_and_score(&mut self, batch: &[(&[f64], PromptId)]) -> Vec<f64> {
        let raws: Vec<Vec<f64>> = batch.iter().map(|(x, z)| self.raw(x, *z)).collect();
        for raw in &raws {
            for (s, v) in self.stats.iter_mut().zip(raw) {
                s.push(*v);
            }
        }
        raws.iter().map(|raw| self.combine(raw)).collect()
    }
}

/// Reward `r(x_0, z)` selectable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RewardFn {
    Proximity(TargetProximity),
    Norm { sign: NormSign },
    Composite(CompositeReward),
}

impl RewardFn {
    pub fn name(&self) -> &'static str {
        match self {
            RewardFn::Proximity(_) => "proximity",
            RewardFn::Norm {
                sign: NormSign::Compress,
            } => "compress",
            RewardFn::Norm {
                sign: NormSign::Incompress,
            } => "incompress",
            RewardFn::Composite(_) => "composite",
        }
    }

    /// Pure evaluation; a composite uses its current normalization state.
    pub fn score(&self, x0: &[f64], z: PromptId) -> f64 {
        match self {
            RewardFn::Proximity(p) => p.score(x0, z),
            RewardFn::Norm { sign } => norm_reward(x0, *sign),
            RewardFn::Composite(c) => c.score(x0, z),
        }
    }

    /// Scores a batch of final samples, updating composite normalization
    /// state in evaluation order.
    pub fn score_batch(&mut self, batch: &[(&[f64], PromptId)]) -> Vec<f64> {
        match self {
            RewardFn::Composite(c) => c.observe_and_score(batch),
            other => batch.iter().map(|(x, z)| other.score(x, *z)).collect(),
        }
    }
}

/// Prompt-alignment score `f(x, z) ∈ (0, 1]`, anchored at the pretraining
/// mode of each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFn {
    pub anchors: Vec<Vec<f64>>,
    pub width: f64,
}

impl AlignmentFn {
    pub fn from_data(data: &ToyDataModel, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::Config(format!("alignment width must be > 0, got {width}")));
        }
        Ok(Self {
            anchors: data.means().to_vec(),
            width,
        })
    }

    pub fn score(&self, x: &[f64], z: PromptId) -> f64 {
        alignment_score(x, &self.anchors[z.0], self.width)
    }
}
