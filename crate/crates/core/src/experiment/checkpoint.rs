//! JSON checkpoints: format version, explicit schedule numbers, architecture
//! dims and the flat parameter vector. Floats are written in shortest
//! round-trip form, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::write_atomic;
use crate::diffusion::{DenoiserModel, ModelDims};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScheduleRecord {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    stage: String,
    seed: u64,
    round: Option<usize>,
    schedule: ScheduleRecord,
    dims: ModelDims,
    param_count: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `pretrain` or `finetune`.
    pub stage: String,
    pub seed: u64,
    /// Fine-tuning rounds completed, if any.
    pub round: Option<usize>,
    pub schedule: NoiseSchedule,
    pub model: DenoiserModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT,
            stage: self.stage.clone(),
            seed: self.seed,
            round: self.round,
            schedule: ScheduleRecord {
                kind: self.schedule.kind(),
                betas: self.schedule.betas().to_vec(),
                alpha_bars: self.schedule.alpha_bars().to_vec(),
            },
            dims: self.model.dims(),
            param_count: self.model.param_count(),
            params: self.model.params().to_vec(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Invalid(e.to_string()))
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::format(origin, e))?;
        if file.format_version != CHECKPOINT_FORMAT {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint format {}", file.format_version),
            ));
        }
        let schedule = NoiseSchedule::from_betas(file.schedule.kind, file.schedule.betas)?;
        if schedule.alpha_bars() != file.schedule.alpha_bars.as_slice() {
            return Err(Error::format(origin, "alpha_bars disagree with betas"));
        }
        if file.params.len() != file.param_count {
            return Err(Error::format(origin, "param_count disagrees with params"));
        }
        let model = DenoiserModel::from_params(file.dims, file.params)?;
        if model.dims().steps != schedule.steps() {
            return Err(Error::format(origin, "model and schedule step counts differ"));
        }
        Ok(Self {
            stage: file.stage,
            seed: file.seed,
            round: file.round,
            schedule,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn sample() -> Checkpoint {
        let schedule = NoiseSchedule::scaled_linear(50, 1e-4, 0.02).unwrap();
        let mut model = DenoiserModel::new(ModelDims::new(2, 4, 50), &mut SeedTree::new(3).stream("init")).unwrap();
        model.params_mut()[0] = 0.1 + 0.2;
        model.params_mut()[1] = f64::MIN_POSITIVE;
        model.params_mut()[2] = -1.0 / 3.0;
        Checkpoint {
            stage: "pretrain".into(),
            seed: 3,
            round: None,
            schedule,
            model,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let bits = |m: &DenoiserModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&ck.model));
        assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_json().unwrap();
        let bad = text.replacen("\"format_version\": 1", "\"format_version\": 9", 1);
        assert!(Checkpoint::from_json(&bad, "x").is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"].as_array_mut().unwrap().pop();
        assert!(Checkpoint::from_json(&v.to_string(), "x").is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["schedule"]["alpha_bars"][3] = serde_json::json!(0.5);
        assert!(Checkpoint::from_json(&v.to_string(), "x").is_err());
    }
}
