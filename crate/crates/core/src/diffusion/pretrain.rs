use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{PromptId, ToyDataModel};
use super::model::DenoiserModel;
use super::noised;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::rng::{standard_normal_vec, SeedTree};
use crate::schedule::NoiseSchedule;

/// Gradients of a batch are accumulated in this many fixed chunks and then
/// summed in chunk order.
pub(crate) const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Window (in steps) for the initial and final loss averages.
    pub smoothing_window: usize,
    /// Success when `final_smoothed < success_ratio · initial`.
    pub success_ratio: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 256,
            lr: 1e-3,
            smoothing_window: 100,
            success_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub model: DenoiserModel,
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_smoothed_loss: f64,
    pub success: bool,
}

struct Example {
    z: PromptId,
    t: usize,
    xt: Vec<f64>,
    eps: Vec<f64>,
}

/// DDPM ε-matching: minimizes `E‖ε − ε_θ(x_t, t, z)‖²` with uniform `t ∈ [1, T]`.
pub fn pretrain(
    mut model: DenoiserModel,
    data: &ToyDataModel,
    s: &NoiseSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if cfg.steps > 0 && cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be positive".into()));
    }
    let mut rng = SeedTree::new(seed).stream("pretrain");
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let n_params = model.param_count();

    for step in 0..cfg.steps {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| {
                let z = data.sample_prompt(&mut rng);
                let x0 = data.sample(z, &mut rng);
                let t = rand::Rng::random_range(&mut rng, 1..=s.steps());
                let eps = standard_normal_vec(&mut rng, data.dim());
                Example {
                    z,
                    t,
                    xt: noised(s, &x0, t, &eps),
                    eps,
                }
            })
            .collect();

        let chunk = batch.len().div_ceil(GRAD_CHUNKS);
        let scale = 1.0 / batch.len() as f64;
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(chunk)
            .map(|examples| {
                let mut grad = vec![0.0; n_params];
                let mut loss = 0.0;
                for ex in examples {
                    let cache = model.forward(&ex.xt, ex.t, ex.z);
                    let d_out: Vec<f64> = cache
                        .output
                        .iter()
                        .zip(&ex.eps)
                        .map(|(p, e)| {
                            loss += (p - e) * (p - e);
                            2.0 * (p - e) * scale
                        })
                        .collect();
                    model.backward(&cache, &d_out, &mut grad);
                }
                (loss, grad)
            })
            .collect();

        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                detail: format!("loss = {loss}"),
            });
        }
        adam.step(model.params_mut(), &grad);
        losses.push(loss);
    }

    let window = cfg.smoothing_window.max(1).min(losses.len().max(1));
    let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let initial_loss = mean(&losses[..window.min(losses.len())]);
    let final_smoothed_loss = mean(&losses[losses.len() - window.min(losses.len())..]);
    let success = final_smoothed_loss < cfg.success_ratio * initial_loss;
    Ok(PretrainOutcome {
        model,
        loss_curve: losses,
        initial_loss,
        final_smoothed_loss,
        success,
    })
}
