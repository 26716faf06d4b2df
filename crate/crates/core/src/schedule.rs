//! Discrete diffusion noise schedules.
//!
//! Forward index convention used throughout the crate: `t ∈ {0..T}`, `x_T` is
//! (near) pure noise and generation visits `t = T → 0`. Per-step sequences are
//! stored 0-based (`betas[t - 1]` is β_t) but every accessor takes the
//! 1-based forward index.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// Upper clamp applied to derived cosine betas.
pub const COSINE_MAX_BETA: f64 = 0.999;

/// Reference step count that the textbook linear bounds (1e-4, 0.02) are
/// quoted for. [`NoiseSchedule::scaled_linear`] rescales by `1000 / T`.
pub const REFERENCE_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "linear schedule needs 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
            .collect();
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    /// Linear schedule whose bounds are quoted for a 1000-step chain and
    /// rescaled by `1000 / T`, so short chains still end close to pure noise.
    pub fn scaled_linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs T >= 2, got 0".into()));
        }
        let scale = REFERENCE_STEPS as f64 / steps as f64;
        Self::linear(steps, beta_min * scale, beta_max * scale)
    }

    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::Config(format!("cosine offset must be > 0, got {offset}")));
        }
        let f = |t: usize| {
            let phase = ((t as f64 / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let raw: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        let betas = (1..=steps)
            .map(|t| (1.0 - raw[t] / raw[t - 1]).min(COSINE_MAX_BETA))
            .collect();
        Self::from_betas(ScheduleKind::Cosine, betas)
    }

    /// Rebuilds a schedule from explicit betas (checkpoints store them verbatim).
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        if kind == ScheduleKind::Linear && betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("linear betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `ᾱ_0..=ᾱ_T` (length `T + 1`).
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        debug_assert!(t >= 1 && t <= self.steps());
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        debug_assert!(t >= 1 && t <= self.steps());
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_time(&self, t: usize) -> Result<()> {
        check_range("t", t, 0, self.steps())
    }

    /// `ᾱ_t / (1 − ᾱ_t)`; infinite at `t = 0`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_time(t)?;
        if t == 0 {
            return Ok(f64::INFINITY);
        }
        let ab = self.alpha_bar(t);
        Ok(ab / (1.0 - ab))
    }

    /// True posterior variance β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t); zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Variance used for transition likelihoods. Equal to β̃_t except at t = 1,
    /// where β̃_1 = 0 and the value of t = 2 stands in (the final transition
    /// itself is sampled deterministically).
    pub fn likelihood_variance(&self, t: usize) -> f64 {
        if t == 1 {
            self.posterior_variance(2)
        } else {
            self.posterior_variance(t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn linear_two_step_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn linear_thousand_matches_high_precision_product() {
        // 50-digit cumulative product of the same betas.
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(rel(s.alpha_bar(1000), 4.0358297653756833148e-5) < 1e-12);
    }

    #[test]
    fn scaled_default_reaches_near_pure_noise() {
        let s = NoiseSchedule::scaled_linear(50, 1e-4, 0.02).unwrap();
        assert!((s.beta(1) - 0.002).abs() < 1e-15);
        assert!((s.beta(50) - 0.4).abs() < 1e-15);
        assert!(rel(s.alpha_bar(50), 7.7447656992267373096e-6) < 1e-12);
    }

    #[test]
    fn linear_rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(2, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn cosine_matches_closed_form() {
        let s = NoiseSchedule::cosine(50, 0.008).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(rel(s.alpha_bar(1), 0.99825248646613455281) < 1e-12);
        assert!(rel(s.alpha_bar(25), 0.49384359044063771332) < 1e-12);
        assert!(rel(s.alpha_bar(49), 0.00097119302987124456327) < 1e-12);
        // β_50 = 1 before the clamp.
        assert_eq!(s.beta(50), COSINE_MAX_BETA);
        assert!(rel(s.alpha_bar(50), 9.7119302987124456327e-7) < 1e-12);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn snr_values() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.snr(0).unwrap(), f64::INFINITY);
        assert!((s.snr(1).unwrap() - 9.0).abs() < 1e-12);
        assert!((s.snr(2).unwrap() - 0.72 / 0.28).abs() < 1e-12);
        assert!(s.snr(3).is_err());
    }

    #[test]
    fn final_likelihood_variance_is_clipped() {
        let s = NoiseSchedule::scaled_linear(50, 1e-4, 0.02).unwrap();
        assert_eq!(s.posterior_variance(1), 0.0);
        assert_eq!(s.likelihood_variance(1), s.posterior_variance(2));
        assert!(s.likelihood_variance(1) > 0.0);
    }

    #[test]
    fn from_betas_roundtrip() {
        let s = NoiseSchedule::cosine(20, 0.008).unwrap();
        let back = NoiseSchedule::from_betas(s.kind(), s.betas().to_vec()).unwrap();
        assert_eq!(s, back);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn any_schedule() -> impl Strategy<Value = NoiseSchedule> {
            prop_oneof![
                (2usize..400, 1e-5f64..0.05, 0.0f64..0.3).prop_map(|(t, lo, extra)| {
                    NoiseSchedule::linear(t, lo, (lo + extra).min(0.5)).unwrap()
                }),
                (2usize..400, 1e-3f64..0.1).prop_map(|(t, off)| NoiseSchedule::cosine(t, off).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn cumulative_product_invariants(s in any_schedule()) {
                prop_assert_eq!(s.alpha_bar(0), 1.0);
                for t in 1..=s.steps() {
                    let expect = s.alpha_bar(t - 1) * s.alpha(t);
                    prop_assert!(((s.alpha_bar(t) - expect) / expect).abs() <= 1e-12);
                    prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                    prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
                }
                for t in 2..=s.steps() {
                    prop_assert!(s.snr(t).unwrap() < s.snr(t - 1).unwrap());
                }
                if s.kind() == ScheduleKind::Linear {
                    for t in 2..=s.steps() {
                        prop_assert!(s.beta(t) >= s.beta(t - 1));
                    }
                }
            }
        }
    }
}
