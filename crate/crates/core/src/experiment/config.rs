//! Run configuration: a sectioned TOML document whose every key has a default.
//!
//! ```toml
//! [schedule]   kind, steps, beta_min, beta_max, scale_to_reference, cosine_offset
//! [data]       dim, prompts, radius, sigma
//! [model]      time_embed, prompt_embed, hidden
//! [pretrain]   steps, batch_size, lr, smoothing_window, success_ratio
//! [finetune]   scope, rounds, trajectories_per_prompt, inner_epochs, minibatches,
//!              clip, lr, reward_scheme, eval_samples_per_prompt
//! [scope]      rho, window, ema, min_width, probe_batch, refresh_every
//! [reward]     name, offset, width, alignment_width, composite, composite_weights
//! [seeds]      seed, ablation
//! [ablate]     grid
//! [analysis]   taus, i, j, mc_samples, covariance
//! [output]     dir, checkpoint_every, wallclock_in_metrics
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::write_atomic;
use crate::diffusion::{DenoiserModel, ModelDims, PretrainConfig, ToyDataModel};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, ScopeMode};
use crate::gauss::DataCovariance;
use crate::reward::{AlignmentFn, CompositeReward, NormSign, RewardFn, TargetProximity};
use crate::rng::SeedTree;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::scope::DetectParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Multiply linear bounds by `1000 / steps`.
    pub scale_to_reference: bool,
    pub cosine_offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            scale_to_reference: true,
            cosine_offset: 0.008,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear if self.scale_to_reference => {
                NoiseSchedule::scaled_linear(self.steps, self.beta_min, self.beta_max)
            }
            ScheduleKind::Linear => NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max),
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.steps, self.cosine_offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub prompts: usize,
    /// Prompt means sit on a circle of this radius.
    pub radius: f64,
    pub sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            prompts: 4,
            radius: 2.0,
            sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub time_embed: usize,
    pub prompt_embed: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = ModelDims::new(2, 4, 50);
        Self {
            time_embed: d.time_embed,
            prompt_embed: d.prompt_embed,
            hidden: d.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardName {
    Proximity,
    Compress,
    Incompress,
    Composite,
}

impl std::str::FromStr for RewardName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proximity" => Ok(RewardName::Proximity),
            "compress" => Ok(RewardName::Compress),
            "incompress" => Ok(RewardName::Incompress),
            "composite" => Ok(RewardName::Composite),
            other => Err(Error::Config(format!(
                "reward must be proximity, compress, incompress or composite; got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub name: RewardName,
    /// Target displacement from each prompt mean.
    pub offset: Vec<f64>,
    pub width: f64,
    pub alignment_width: f64,
    /// Components of the composite reward (any non-composite names).
    pub composite: Vec<RewardName>,
    pub composite_weights: Vec<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            name: RewardName::Proximity,
            offset: vec![0.8, 0.0],
            width: 0.6,
            alignment_width: 0.5,
            composite: vec![RewardName::Proximity, RewardName::Compress],
            composite_weights: vec![0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub ablation: Vec<u64>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            ablation: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub grid: Vec<ScopeMode>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            grid: vec![ScopeMode::Full, ScopeMode::Adaptive, ScopeMode::Fixed { start: 5, end: 32 }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub taus: Vec<usize>,
    pub i: usize,
    pub j: usize,
    pub mc_samples: usize,
    /// Data covariance rows; empty means `sigma² · I`.
    pub covariance: Vec<Vec<f64>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            taus: vec![1, 5],
            i: 0,
            j: 0,
            mc_samples: 100_000,
            covariance: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Fine-tuning checkpoint period in rounds; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Fill the `wallclock_s` column of metrics.csv. Off by default so that
    /// metrics files are byte-reproducible; timings always go to
    /// diagnostics.csv.
    pub wallclock_in_metrics: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            wallclock_in_metrics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub scope: DetectParams,
    pub reward: RewardConfig,
    pub seeds: SeedConfig,
    pub ablate: AblateConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

fn collect(problems: &mut Vec<String>, r: Result<()>) {
    match r {
        Ok(()) => {}
        Err(Error::ConfigKeys(v)) => problems.extend(v),
        Err(e) => problems.push(e.to_string()),
    }
}

/// Keys present in `given` but absent from `known`, as dotted paths.
fn unknown_keys(prefix: &str, given: &toml::Table, known: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => out.push(path),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => unknown_keys(&path, g, kn, out),
            _ => {}
        }
    }
}

/// Top-level sections that may be given as tables.
const SECTIONS: [&str; 11] = [
    "schedule", "data", "model", "pretrain", "finetune", "scope", "reward", "seeds", "ablate", "analysis", "output",
];

impl RunConfig {
    /// Parses TOML text, listing every unknown or ill-typed key before
    /// validating values.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::format(origin, e))?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::format(origin, e))?;
        let mut problems = Vec::new();
        let mut unknown = Vec::new();
        unknown_keys("", &table, &known, &mut unknown);
        problems.extend(unknown.into_iter().map(|k| format!("unknown key `{k}`")));
        for section in SECTIONS {
            let Some(value) = table.get(section) else { continue };
            let Some(body) = value.as_table() else {
                problems.push(format!("`{section}` must be a table"));
                continue;
            };
            // Type-check one key at a time so every bad key is reported.
            let known_section = known[section].as_table().expect("sections serialize as tables");
            for (k, v) in body {
                if !known_section.contains_key(k) {
                    continue;
                }
                let mut probe = known_section.clone();
                probe.insert(k.clone(), v.clone());
                let mut wrapper = toml::Table::new();
                wrapper.insert(section.to_string(), toml::Value::Table(probe));
                if let Err(e) = toml::Value::Table(wrapper).try_into::<RunConfig>() {
                    problems.push(format!("`{section}.{k}`: {}", e.message()));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::ConfigKeys(problems));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::format(origin, e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_toml_string()?.as_bytes())
    }

    /// Content hash of the canonical serialization, computed like a git
    /// blob id but with SHA-256.
    pub fn content_hash(&self) -> Result<String> {
        let body = self.to_toml_string()?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    /// Collects every value problem; builds each derived object once to
    /// surface its own checks.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        collect(&mut problems, self.schedule.build().map(|_| ()));
        let horizon = self.schedule.steps;
        collect(&mut problems, self.data().map(|_| ()));
        collect(&mut problems, self.model_dims().map(|_| ()));
        if self.pretrain.steps > 0 && self.pretrain.batch_size == 0 {
            problems.push("pretrain.batch_size must be >= 1".into());
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            problems.push(format!("pretrain.lr must be positive, got {}", self.pretrain.lr));
        }
        if self.pretrain.smoothing_window == 0 {
            problems.push("pretrain.smoothing_window must be >= 1".into());
        }
        collect(&mut problems, self.finetune.validate(horizon));
        collect(&mut problems, self.scope.validate());
        if self.scope.probe_batch == 0 {
            problems.push("scope.probe_batch must be >= 1".into());
        }
        if self.scope.min_width + 1 > horizon {
            problems.push(format!("scope.min_width must be < schedule.steps ({horizon})"));
        }
        if self.reward.composite.contains(&RewardName::Composite) {
            problems.push("reward.composite cannot contain `composite`".into());
        }
        collect(&mut problems, self.reward_fn().map(|_| ()));
        collect(&mut problems, self.alignment().map(|_| ()));
        if self.seeds.ablation.is_empty() {
            problems.push("seeds.ablation must list at least one seed".into());
        }
        if self.ablate.grid.is_empty() {
            problems.push("ablate.grid must list at least one scope".into());
        }
        for (n, mode) in self.ablate.grid.iter().enumerate() {
            if let ScopeMode::Fixed { end, .. } = mode {
                if *end >= horizon {
                    problems.push(format!("ablate.grid[{n}] = {mode} exceeds the last step {}", horizon - 1));
                }
            }
        }
        if self.analysis.taus.iter().any(|t| *t == 0 || *t > horizon) {
            problems.push(format!("analysis.taus must lie in [1, {horizon}]"));
        }
        if self.analysis.i >= self.data.dim || self.analysis.j >= self.data.dim {
            problems.push(format!("analysis.i and analysis.j must be < data.dim ({})", self.data.dim));
        }
        if self.analysis.mc_samples < 2 {
            problems.push("analysis.mc_samples must be >= 2".into());
        }
        collect(&mut problems, self.covariance().map(|_| ()));
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys(problems))
        }
    }

    pub fn data(&self) -> Result<ToyDataModel> {
        ToyDataModel::on_circle(self.data.dim, self.data.prompts, self.data.radius, self.data.sigma)
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let dims = ModelDims {
            time_embed: self.model.time_embed,
            prompt_embed: self.model.prompt_embed,
            hidden: self.model.hidden,
            ..ModelDims::new(self.data.dim, self.data.prompts, self.schedule.steps)
        };
        dims.validate()?;
        Ok(dims)
    }

    /// Freshly initialized model for `seed`.
    pub fn init_model(&self, seed: u64) -> Result<DenoiserModel> {
        DenoiserModel::new(self.model_dims()?, &mut SeedTree::new(seed).stream("init"))
    }

    fn single_reward(&self, name: RewardName) -> Result<RewardFn> {
        Ok(match name {
            RewardName::Proximity => {
                RewardFn::Proximity(TargetProximity::offset_from(&self.data()?, &self.reward.offset, self.reward.width)?)
            }
            RewardName::Compress => RewardFn::Norm {
                sign: NormSign::Compress,
            },
            RewardName::Incompress => RewardFn::Norm {
                sign: NormSign::Incompress,
            },
            RewardName::Composite => return Err(Error::Config("composite rewards cannot nest".into())),
        })
    }

    pub fn reward_fn(&self) -> Result<RewardFn> {
        match self.reward.name {
            RewardName::Composite => {
                let parts = self
                    .reward
                    .composite
                    .iter()
                    .map(|n| self.single_reward(*n))
                    .collect::<Result<Vec<_>>>()?;
                Ok(RewardFn::Composite(CompositeReward::new(parts, self.reward.composite_weights.clone())?))
            }
            name => self.single_reward(name),
        }
    }

    pub fn alignment(&self) -> Result<AlignmentFn> {
        AlignmentFn::from_data(&self.data()?, self.reward.alignment_width)
    }

    pub fn covariance(&self) -> Result<DataCovariance> {
        if self.analysis.covariance.is_empty() {
            return DataCovariance::isotropic(self.data.dim, self.data.sigma * self.data.sigma);
        }
        let rows: Vec<&[f64]> = self.analysis.covariance.iter().map(|r| r.as_slice()).collect();
        let cov = DataCovariance::from_rows(&rows)?;
        if cov.dim() != self.data.dim {
            return Err(Error::Config(format!(
                "analysis.covariance is {0}x{0} but data.dim is {1}",
                cov.dim(),
                self.data.dim
            )));
        }
        Ok(cov)
    }

    /// Every key path the schema accepts.
    pub fn documented_keys() -> BTreeSet<String> {
        let known = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut out = BTreeSet::new();
        for (section, body) in &known {
            for key in body.as_table().into_iter().flat_map(|t| t.keys()) {
                out.insert(format!("{section}.{key}"));
            }
        }
        out
    }
}
