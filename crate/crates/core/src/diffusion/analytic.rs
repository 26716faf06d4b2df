use nalgebra::{DMatrix, DVector};

use super::data::PromptId;
use super::model::EpsPredictor;
use crate::error::{Error, Result};
use crate::gauss::GaussianData;
use crate::schedule::NoiseSchedule;

/// The exact noise predictor for per-prompt Gaussian data, i.e. a perfectly
/// trained model. Gains are precomputed per `(prompt, t)`.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    dim: usize,
    /// `gains[z][t - 1] = √(1−ᾱ_t) (ᾱ_t Σ_z + (1−ᾱ_t) I)^{-1}`
    gains: Vec<Vec<DMatrix<f64>>>,
    /// `centers[z][t - 1] = √ᾱ_t μ_z`
    centers: Vec<Vec<DVector<f64>>>,
}

impl AnalyticDenoiser {
    pub fn new(s: &NoiseSchedule, prompts: Vec<GaussianData>) -> Result<Self> {
        let dim = prompts
            .first()
            .map(|g| g.cov.dim())
            .ok_or_else(|| Error::Invalid("need at least one prompt distribution".into()))?;
        let mut gains = Vec::with_capacity(prompts.len());
        let mut centers = Vec::with_capacity(prompts.len());
        for g in &prompts {
            if g.cov.dim() != dim {
                return Err(Error::Invalid("prompt distributions differ in dimension".into()));
            }
            let mut gz = Vec::with_capacity(s.steps());
            let mut cz = Vec::with_capacity(s.steps());
            for t in 1..=s.steps() {
                let (mean, cov) = g.marginal(s, t);
                let inv = cov
                    .try_inverse()
                    .ok_or_else(|| Error::DegenerateCovariance("singular marginal covariance".into()))?;
                gz.push(inv * (1.0 - s.alpha_bar(t)).sqrt());
                cz.push(mean);
            }
            gains.push(gz);
            centers.push(cz);
        }
        Ok(Self { dim, gains, centers })
    }
}

impl EpsPredictor for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(&self, x: &[f64], t: usize, z: PromptId) -> Vec<f64> {
        let centered = DVector::from_column_slice(x) - &self.centers[z.0][t - 1];
        (&self.gains[z.0][t - 1] * centered).iter().copied().collect()
    }
}
