//! Toy conditional diffusion stack: forward noising, the noise-prediction
//! network, DDPM pretraining, ancestral sampling and pseudo-x̂₀ reconstruction.

mod analytic;
mod data;
mod model;
mod optim;
mod pretrain;
mod sampler;

pub use analytic::AnalyticDenoiser;
pub use data::{PromptId, ToyDataModel};
pub use model::{DenoiserModel, EpsPredictor, ForwardCache, ModelDims};
pub use optim::Adam;
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub(crate) use pretrain::GRAD_CHUNKS;
pub use sampler::{sample_batch, sample_trajectory, Trajectory};

use rand::Rng;

use crate::error::{check_range, Error, Result};
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;

/// Smallest `ᾱ_t` for which x̂₀ reconstruction is attempted.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

/// Draws `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε` and returns `(x_t, ε)`. At `t = 0`
/// no noise is drawn and `ε` is returned as zeros.
pub fn forward_sample<R: Rng + ?Sized>(
    s: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    s.check_time(t)?;
    if t == 0 {
        return Ok((x0.to_vec(), vec![0.0; x0.len()]));
    }
    let eps = standard_normal_vec(rng, x0.len());
    Ok((noised(s, x0, t, &eps), eps))
}

pub(crate) fn noised(s: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// One-shot clean-sample estimate `x̂₀ = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn pseudo_x0(s: &NoiseSchedule, xt: &[f64], t: usize, eps_pred: &[f64]) -> Result<Vec<f64>> {
    check_range("t", t, 1, s.steps())?;
    let ab = s.alpha_bar(t);
    if ab < MIN_ALPHA_BAR {
        return Err(Error::NumericallyDegenerate(format!("alpha_bar({t}) = {ab:e}")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(xt.iter().zip(eps_pred).map(|(x, e)| (x - b * e) / a).collect())
}

/// Derivative of the reverse-transition mean with respect to the noise
/// prediction: `−β_t / (√α_t √(1−ᾱ_t))`.
pub fn mean_eps_coefficient(s: &NoiseSchedule, t: usize) -> f64 {
    -s.beta(t) / (s.alpha(t).sqrt() * (1.0 - s.alpha_bar(t)).sqrt())
}

/// Reverse-transition mean `(x_t − β_t/√(1−ᾱ_t) ε̂) / √α_t`.
pub fn transition_mean(s: &NoiseSchedule, xt: &[f64], t: usize, eps_pred: &[f64]) -> Vec<f64> {
    let inv = 1.0 / s.alpha(t).sqrt();
    let c = mean_eps_coefficient(s, t);
    xt.iter().zip(eps_pred).map(|(x, e)| inv * x + c * e).collect()
}

/// Log-density of an isotropic Gaussian `N(mean, var·I)` at `x`.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * sq / var - 0.5 * x.len() as f64 * (std::f64::consts::TAU * var).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn forward_at_zero_is_identity() {
        let mut rng = SeedTree::new(1).stream("f");
        let (xt, eps) = forward_sample(&schedule(), &[1.5, -2.0], 0, &mut rng).unwrap();
        assert_eq!(xt, vec![1.5, -2.0]);
        assert_eq!(eps, vec![0.0, 0.0]);
        assert!(forward_sample(&schedule(), &[1.5, -2.0], 51, &mut rng).is_err());
    }

    #[test]
    fn forward_is_reproducible() {
        let s = schedule();
        let a = forward_sample(&s, &[1.0, 0.0], 10, &mut SeedTree::new(4).stream("f")).unwrap();
        let b = forward_sample(&s, &[1.0, 0.0], 10, &mut SeedTree::new(4).stream("f")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_mean_matches_signal_level() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap(); // ᾱ_2 = 0.72
        let mut rng = SeedTree::new(2).stream("f");
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let (xt, _) = forward_sample(&s, &[1.0, 0.0], 2, &mut rng).unwrap();
            sum[0] += xt[0];
            sum[1] += xt[1];
        }
        let se = (0.28f64).sqrt() / (n as f64).sqrt();
        assert!((sum[0] / n as f64 - 0.72f64.sqrt()).abs() < 3.0 * se);
        assert!((sum[1] / n as f64).abs() < 3.0 * se);
    }

    #[test]
    fn pseudo_x0_hand_value() {
        let s = NoiseSchedule::from_betas(crate::schedule::ScheduleKind::Cosine, vec![0.75, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(1), 0.25);
        let x = pseudo_x0(&s, &[1.0], 1, &[0.5]).unwrap();
        assert!((x[0] - 1.1339745962155613532).abs() < 1e-12);
        let zero = pseudo_x0(&s, &[1.0], 1, &[0.0]).unwrap();
        assert_eq!(zero, vec![2.0]);
        assert!(pseudo_x0(&s, &[1.0], 0, &[0.0]).is_err());
    }

    #[test]
    fn log_density_standard_normal() {
        let lp = gaussian_log_density(&[0.0], &[0.0], 1.0);
        assert!((lp + 0.5 * std::f64::consts::TAU.ln()).abs() < 1e-15);
    }

    mod props {
        use super::super::*;
        use crate::rng::SeedTree;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2_000))]
            #[test]
            fn pseudo_x0_inverts_forward(x0 in proptest::collection::vec(-5.0f64..5.0, 2), t in 1usize..=50, seed in any::<u64>()) {
                let s = NoiseSchedule::scaled_linear(50, 1e-4, 0.02).unwrap();
                let (xt, eps) = forward_sample(&s, &x0, t, &mut SeedTree::new(seed).stream("p")).unwrap();
                let back = pseudo_x0(&s, &xt, t, &eps).unwrap();
                for (a, b) in back.iter().zip(&x0) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
