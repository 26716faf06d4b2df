use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::PromptId;
use super::model::EpsPredictor;
use super::{gaussian_log_density, pseudo_x0, transition_mean};
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, SeedTree};
use crate::schedule::NoiseSchedule;

/// One full ancestral rollout `x_T → x_0`.
///
/// Everything is stored in generation order: entry `k` of a per-step vector
/// belongs to forward time `t = T − k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptId,
    /// `x_T, x_{T−1}, …, x_0` (`T + 1` states).
    pub states: Vec<Vec<f64>>,
    /// Mean of the Gaussian transition `x_{T−k} → x_{T−k−1}`.
    pub means: Vec<Vec<f64>>,
    /// Variance of that transition used for likelihoods.
    pub variances: Vec<f64>,
    /// Log-density of the recorded next state under `(means[k], variances[k])`.
    pub log_probs: Vec<f64>,
    /// Pseudo-x̂₀ evaluated at state `x_{T−k}`, `k = 0..T`.
    pub x0_hats: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.means.len()
    }

    pub fn final_sample(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn state_at_time(&self, t: usize) -> &[f64] {
        &self.states[self.steps() - t]
    }

    pub fn is_complete(&self) -> bool {
        let n = self.steps();
        n > 0
            && self.states.len() == n + 1
            && self.variances.len() == n
            && self.log_probs.len() == n
            && self.x0_hats.len() == n
    }
}

/// Ancestral DDPM rollout for prompt `z`. The last transition (`t = 1 → 0`)
/// returns its mean without added noise.
pub fn sample_trajectory<P, R>(model: &P, s: &NoiseSchedule, z: PromptId, rng: &mut R) -> Result<Trajectory>
where
    P: EpsPredictor + ?Sized,
    R: rand::Rng + ?Sized,
{
    let steps = s.steps();
    let dim = model.dim();
    let mut x = standard_normal_vec(rng, dim);
    let mut traj = Trajectory {
        prompt: z,
        states: Vec::with_capacity(steps + 1),
        means: Vec::with_capacity(steps),
        variances: Vec::with_capacity(steps),
        log_probs: Vec::with_capacity(steps),
        x0_hats: Vec::with_capacity(steps),
    };
    traj.states.push(x.clone());
    for t in (1..=steps).rev() {
        let eps = model.predict_eps(&x, t, z);
        let x0_hat = pseudo_x0(s, &x, t, &eps)?;
        let mean = transition_mean(s, &x, t, &eps);
        let var = s.likelihood_variance(t);
        let next: Vec<f64> = if t > 1 {
            let std = s.posterior_variance(t).sqrt();
            mean.iter()
                .zip(standard_normal_vec(rng, dim))
                .map(|(m, e)| m + std * e)
                .collect()
        } else {
            mean.clone()
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { t });
        }
        traj.log_probs.push(gaussian_log_density(&next, &mean, var));
        traj.variances.push(var);
        traj.means.push(mean);
        traj.x0_hats.push(x0_hat);
        traj.states.push(next.clone());
        x = next;
    }
    Ok(traj)
}

/// Samples one trajectory per entry of `prompts` in parallel. Trajectory `i`
/// draws from stream `"{label}/{i}"` of `tree`, so the result does not depend
/// on thread count.
pub fn sample_batch<P>(
    model: &P,
    s: &NoiseSchedule,
    prompts: &[PromptId],
    tree: &SeedTree,
    label: &str,
) -> Result<Vec<Trajectory>>
where
    P: EpsPredictor + ?Sized,
{
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, &z)| {
            let mut rng = tree.stream(&format!("{label}/{i}"));
            sample_trajectory(model, s, z, &mut rng)
        })
        .collect()
}
