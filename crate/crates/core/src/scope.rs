//! Adaptive selection of the RL fine-tuning interval `[t_start, t_end]`.
//!
//! Probe rollouts record pseudo-x̂₀ at every state. Scoring those estimates
//! with an alignment function `f` gives the Structural Gain series
//! `ΔS_k = f(x̂₀ at step k) − f(x̂₀ at step k−1)` for MDP steps `k = 1..T−1`;
//! scoring them with the reward `g` gives the Preference Gain `ΔP_k`.
//!
//! A detector EMA-smooths the gain series, takes first differences `D_j`
//! (`j = 0..T−3`) and returns the smallest `j` at which `|D|` stays below
//! `ρ · max|D|` for `window` consecutive entries. The scan begins at the
//! largest `|D|`: a gain that has not moved yet (x̂₀ still far from any
//! mode, so `f` and `g` are flat at zero) is not a gain that has settled.
//! The returned `j` is used directly as the MDP step index of the scope
//! boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_batch, EpsPredictor, PromptId, Trajectory};
use crate::error::{Error, Result};
use crate::reward::{AlignmentFn, RewardFn};
use crate::rng::SeedTree;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    /// Relative threshold: a difference is "quiet" when `|D| ≤ rho · max|D|`.
    pub rho: f64,
    /// Number of consecutive quiet differences required.
    pub window: usize,
    /// EMA coefficient applied to the raw gain series.
    pub ema: f64,
    /// Minimum distance between `t_start` and `t_end`.
    pub min_width: usize,
    /// Trajectories rolled out per prompt to estimate the gain series.
    pub probe_batch: usize,
    /// Scopes are recomputed every this many fine-tuning rounds.
    pub refresh_every: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            rho: 0.05,
            window: 3,
            ema: 0.3,
            min_width: 5,
            probe_batch: 128,
            refresh_every: 5,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            problems.push(format!("scope.rho must be in (0, 1], got {}", self.rho));
        }
        if self.window == 0 {
            problems.push("scope.window must be >= 1".to_string());
        }
        if !(self.ema > 0.0 && self.ema <= 1.0) {
            problems.push(format!("scope.ema must be in (0, 1], got {}", self.ema));
        }
        if self.refresh_every == 0 {
            problems.push("scope.refresh_every must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainKind {
    Structural,
    Preference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSeries {
    pub kind: GainKind,
    /// Entry `p` belongs to MDP step `k = p + 1`.
    pub values: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl GainSeries {
    pub fn new(kind: GainKind, values: Vec<f64>, ema: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("gain series contains non-finite values".into()));
        }
        let smoothed = ema_smooth(&values, ema);
        Ok(Self { kind, values, smoothed })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of MDP steps `T` of the trajectories this was built from.
    pub fn horizon(&self) -> usize {
        self.values.len() + 1
    }

    pub fn differences(&self) -> Vec<f64> {
        first_differences(&self.smoothed)
    }
}

/// `s_0 = v_0`, `s_k = a·v_k + (1 − a)·s_{k−1}`.
pub fn ema_smooth(values: &[f64], coef: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(prev) => coef * v + (1.0 - coef) * prev,
        };
        out.push(next);
        acc = Some(next);
    }
    out
}

pub fn first_differences(xs: &[f64]) -> Vec<f64> {
    xs.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Per-step differences of `score(x̂₀)` along generation, averaged over the batch.
pub fn gain_series<F>(trajs: &[Trajectory], kind: GainKind, ema: f64, score: F) -> Result<GainSeries>
where
    F: Fn(&[f64], PromptId) -> f64,
{
    let Some(first) = trajs.first() else {
        return Err(Error::EmptyBatch("gain series needs at least one trajectory"));
    };
    let horizon = first.x0_hats.len();
    if horizon < 2 || trajs.iter().any(|t| t.x0_hats.len() != horizon) {
        return Err(Error::Invalid("trajectories must share a horizon of at least 2".into()));
    }
    let mut sums = vec![0.0; horizon - 1];
    for traj in trajs {
        let scores: Vec<f64> = traj.x0_hats.iter().map(|x| score(x, traj.prompt)).collect();
        for (acc, w) in sums.iter_mut().zip(scores.windows(2)) {
            *acc += w[1] - w[0];
        }
    }
    let n = trajs.len() as f64;
    GainSeries::new(kind, sums.into_iter().map(|s| s / n).collect(), ema)
}

pub fn structural_gain_series(trajs: &[Trajectory], f: &AlignmentFn, ema: f64) -> Result<GainSeries> {
    gain_series(trajs, GainKind::Structural, ema, |x, z| f.score(x, z))
}

pub fn preference_gain_series(trajs: &[Trajectory], g: &RewardFn, ema: f64) -> Result<GainSeries> {
    gain_series(trajs, GainKind::Preference, ema, |x, z| g.score(x, z))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// MDP step index of the boundary.
    pub index: usize,
    pub threshold: f64,
    pub differences: Vec<f64>,
    /// No quiet run was found; the full-trajectory boundary was used.
    pub fallback: bool,
    /// The difference series was identically zero.
    pub trivial: bool,
}

fn first_quiet(diffs: &[f64], threshold: f64, window: usize, from: usize) -> Option<usize> {
    if diffs.len() < window {
        return None;
    }
    (from..=diffs.len() - window).find(|&k| diffs[k..k + window].iter().all(|d| d.abs() <= threshold))
}

fn max_abs(diffs: &[f64]) -> f64 {
    diffs.iter().fold(0.0, |m, d| m.max(d.abs()))
}

/// First index attaining `max|D|`.
fn peak_index(diffs: &[f64]) -> usize {
    let peak = max_abs(diffs);
    diffs.iter().position(|d| d.abs() == peak).unwrap_or(0)
}

/// Start detection on an explicit difference series.
pub fn detect_start_from_differences(diffs: Vec<f64>, params: &DetectParams) -> Detection {
    let peak = max_abs(&diffs);
    if peak == 0.0 {
        return Detection {
            index: 0,
            threshold: 0.0,
            differences: diffs,
            fallback: false,
            trivial: true,
        };
    }
    let threshold = params.rho * peak;
    let found = first_quiet(&diffs, threshold, params.window, peak_index(&diffs));
    Detection {
        index: found.unwrap_or(0),
        threshold,
        differences: diffs,
        fallback: found.is_none(),
        trivial: false,
    }
}

/// End detection on an explicit difference series for an MDP horizon `T`;
/// only indices `≥ t_start + min_width` and at or after the largest `|D|`
/// qualify.
pub fn detect_end_from_differences(
    diffs: Vec<f64>,
    t_start: usize,
    params: &DetectParams,
    horizon: usize,
) -> Detection {
    let last = horizon.saturating_sub(1);
    let earliest = t_start + params.min_width;
    let peak = max_abs(&diffs);
    if peak == 0.0 {
        return Detection {
            index: earliest.min(last),
            threshold: 0.0,
            differences: diffs,
            fallback: earliest > last,
            trivial: true,
        };
    }
    let threshold = params.rho * peak;
    let from = earliest.max(peak_index(&diffs));
    let found = first_quiet(&diffs, threshold, params.window, from).filter(|&k| k <= last);
    Detection {
        index: found.unwrap_or(last),
        threshold,
        differences: diffs,
        fallback: found.is_none(),
        trivial: false,
    }
}

fn check_length(gs: &GainSeries, params: &DetectParams) -> Result<()> {
    if gs.len() < params.window + 1 {
        return Err(Error::Invalid(format!(
            "gain series of length {} is shorter than window + 1 = {}",
            gs.len(),
            params.window + 1
        )));
    }
    Ok(())
}

pub fn detect_start(gs: &GainSeries, params: &DetectParams) -> Result<Detection> {
    check_length(gs, params)?;
    Ok(detect_start_from_differences(gs.differences(), params))
}

pub fn detect_end(gp: &GainSeries, t_start: usize, params: &DetectParams) -> Result<Detection> {
    check_length(gp, params)?;
    Ok(detect_end_from_differences(gp.differences(), t_start, params, gp.horizon()))
}

/// Inclusive range of MDP steps that receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: usize,
    pub end: usize,
}

impl StepRange {
    pub fn new(start: usize, end: usize, horizon: usize) -> Result<Self> {
        if start > end || end + 1 > horizon {
            return Err(Error::Invalid(format!(
                "scope [{start}, {end}] invalid for horizon {horizon}"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn full(horizon: usize) -> Self {
        Self {
            start: 0,
            end: horizon - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, k: usize) -> bool {
        self.start <= k && k <= self.end
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeDecision {
    pub prompt: PromptId,
    pub t_start: usize,
    pub t_end: usize,
    pub horizon: usize,
    pub structural: GainSeries,
    pub preference: GainSeries,
    pub start: Detection,
    pub end: Detection,
}

impl ScopeDecision {
    pub fn range(&self) -> StepRange {
        StepRange {
            start: self.t_start,
            end: self.t_end,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.t_start <= self.t_end && self.t_end < self.horizon
    }
}

/// Builds a decision from already-computed gain series.
pub fn decide(
    prompt: PromptId,
    structural: GainSeries,
    preference: GainSeries,
    params: &DetectParams,
) -> Result<ScopeDecision> {
    if structural.len() != preference.len() {
        return Err(Error::Invalid("gain series lengths differ".into()));
    }
    let start = detect_start(&structural, params)?;
    let end = detect_end(&preference, start.index, params)?;
    let horizon = structural.horizon();
    let t_start = start.index.min(horizon - 1);
    let t_end = end.index.max(t_start);
    let decision = ScopeDecision {
        prompt,
        t_start,
        t_end,
        horizon,
        structural,
        preference,
        start,
        end,
    };
    debug_assert!(decision.is_valid());
    Ok(decision)
}

/// Rolls out `params.probe_batch` trajectories for `z` with the frozen model
/// and detects the scope. Probe trajectory `i` uses stream `"{label}/{i}"`.
#[allow(clippy::too_many_arguments)]
pub fn select_scope<P: EpsPredictor + ?Sized>(
    model: &P,
    s: &NoiseSchedule,
    z: PromptId,
    f: &AlignmentFn,
    g: &RewardFn,
    params: &DetectParams,
    tree: &SeedTree,
    label: &str,
) -> Result<ScopeDecision> {
    if params.probe_batch == 0 {
        return Err(Error::EmptyBatch("probe_batch must be positive"));
    }
    params.validate()?;
    let prompts = vec![z; params.probe_batch];
    let probes = sample_batch(model, s, &prompts, tree, label)?;
    let structural = structural_gain_series(&probes, f, params.ema)?;
    let preference = preference_gain_series(&probes, g, params.ema)?;
    decide(z, structural, preference, params)
}

/// Per-prompt scope decisions with an age counter (rounds since computed).
#[derive(Debug, Clone, Default)]
pub struct ScopeCache {
    entries: BTreeMap<PromptId, (ScopeDecision, usize)>,
}

impl ScopeCache {
    pub fn get(&self, z: PromptId) -> Option<&ScopeDecision> {
        self.entries.get(&z).map(|(d, _)| d)
    }

    pub fn is_stale(&self, z: PromptId, refresh_every: usize) -> bool {
        self.entries.get(&z).is_none_or(|(_, age)| *age >= refresh_every)
    }

    pub fn insert(&mut self, decision: ScopeDecision) {
        self.entries.insert(decision.prompt, (decision, 0));
    }

    /// Advances every entry's age by one round.
    pub fn tick(&mut self) {
        for (_, age) in self.entries.values_mut() {
            *age += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rho: f64, window: usize, min_width: usize) -> DetectParams {
        DetectParams {
            rho,
            window,
            min_width,
            ..Default::default()
        }
    }

    fn traj_with_hats(hats: &[f64]) -> Trajectory {
        let n = hats.len();
        Trajectory {
            prompt: PromptId(0),
            states: vec![vec![0.0]; n + 1],
            means: vec![vec![0.0]; n],
            variances: vec![1.0; n],
            log_probs: vec![0.0; n],
            x0_hats: hats.iter().map(|h| vec![*h]).collect(),
        }
    }

    fn identity_score(x: &[f64], _: PromptId) -> f64 {
        x[0]
    }

    #[test]
    fn constant_score_gives_zero_series() {
        let t = traj_with_hats(&[0.3, 1.0, -2.0, 4.0]);
        let gs = gain_series(&[t], GainKind::Structural, 0.3, |_, _| 0.7).unwrap();
        assert!(gs.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_differenced_structural_gain() {
        let t = traj_with_hats(&[0.0, 0.5, 0.9, 1.0, 1.0]);
        let gs = gain_series(&[t], GainKind::Structural, 0.3, identity_score).unwrap();
        let expect = [0.5, 0.4, 0.1, 0.0];
        for (a, b) in gs.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(gs.horizon(), 5);
    }

    #[test]
    fn hand_differenced_preference_gain() {
        let t = traj_with_hats(&[0.0, 0.0, 0.2, 0.6, 0.8]);
        let gs = gain_series(&[t], GainKind::Preference, 0.3, identity_score).unwrap();
        let expect = [0.0, 0.2, 0.4, 0.2];
        for (a, b) in gs.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_average_is_elementwise_mean() {
        let a = traj_with_hats(&[0.0, 1.0, 3.0]);
        let b = traj_with_hats(&[0.0, 3.0, 4.0]);
        let gs = gain_series(&[a, b], GainKind::Structural, 0.3, identity_score).unwrap();
        assert_eq!(gs.values, vec![2.0, 1.5]);
        assert!(gain_series(&[], GainKind::Structural, 0.3, identity_score).is_err());
    }

    #[test]
    fn structural_and_preference_agree_when_scores_agree() {
        let t = traj_with_hats(&[0.0, 0.4, 0.1]);
        let f = AlignmentFn {
            anchors: vec![vec![0.0]],
            width: 0.5,
        };
        let g = RewardFn::Proximity(crate::reward::TargetProximity {
            targets: vec![vec![0.0]],
            width: 0.5,
        });
        let a = structural_gain_series(std::slice::from_ref(&t), &f, 0.3).unwrap();
        let b = preference_gain_series(&[t], &g, 0.3).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.smoothed, b.smoothed);
    }

    #[test]
    fn ema_definition() {
        let s = ema_smooth(&[1.0, 0.0, 0.0], 0.3);
        assert_eq!(s, vec![1.0, 0.7, 0.7 * 0.7]);
    }

    #[test]
    fn start_on_constructed_differences() {
        let d = vec![0.9, 0.7, 0.05, 0.01, 0.0, 0.0];
        let det = detect_start_from_differences(d, &params(0.1, 2, 5));
        assert_eq!(det.index, 2);
        assert!((det.threshold - 0.09).abs() < 1e-15);
        assert!(!det.fallback && !det.trivial);
    }

    #[test]
    fn start_falls_back_on_constant_derivative() {
        let det = detect_start_from_differences(vec![0.2; 10], &params(0.5, 3, 5));
        assert_eq!(det.index, 0);
        assert!(det.fallback);
        // linear ΔS → constant D ≠ 0
        let gs = GainSeries::new(GainKind::Structural, (0..12).map(|k| k as f64).collect(), 1.0).unwrap();
        let det = detect_start(&gs, &params(0.5, 3, 5)).unwrap();
        assert!(det.fallback && det.index == 0);
    }

    #[test]
    fn start_trivial_on_zero_series() {
        let gs = GainSeries::new(GainKind::Structural, vec![0.0; 10], 0.3).unwrap();
        let det = detect_start(&gs, &DetectParams::default()).unwrap();
        assert_eq!(det.index, 0);
        assert!(det.trivial);
    }

    #[test]
    fn end_on_constructed_differences() {
        let mut d = vec![0.8, -0.6, 0.5, 0.4, -0.3, 0.3, 0.2, 0.2];
        d.extend([0.0; 6]);
        let det = detect_end_from_differences(d, 2, &params(0.05, 3, 3), 16);
        assert_eq!(det.index, 8);
        assert!(!det.fallback);
    }

    #[test]
    fn end_falls_back_when_never_saturating() {
        let d: Vec<f64> = (0..14).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let det = detect_end_from_differences(d, 2, &params(0.05, 3, 3), 16);
        assert_eq!(det.index, 15);
        assert!(det.fallback);
    }

    #[test]
    fn end_on_flat_series_is_earliest_admissible() {
        let gp = GainSeries::new(GainKind::Preference, vec![0.0; 15], 0.3).unwrap();
        let det = detect_end(&gp, 2, &params(0.05, 3, 3)).unwrap();
        assert_eq!(det.index, 5);
        assert!(det.trivial);
    }

    #[test]
    fn short_series_rejected() {
        let gs = GainSeries::new(GainKind::Structural, vec![0.1, 0.2, 0.3], 0.3).unwrap();
        assert!(detect_start(&gs, &DetectParams::default()).is_err());
    }

    #[test]
    fn maximal_threshold_gives_minimal_scope() {
        let decaying = |phase: f64| (0..20).map(|k| 0.7f64.powi(k) * (k as f64 + phase).cos()).collect::<Vec<_>>();
        let s = GainSeries::new(GainKind::Structural, decaying(0.0), 0.3).unwrap();
        let p = GainSeries::new(GainKind::Preference, decaying(0.5), 0.3).unwrap();
        let d = decide(PromptId(0), s, p, &params(1.0, 3, 5)).unwrap();
        assert_eq!(d.t_start, peak_index(&d.start.differences));
        assert_eq!(d.t_end - d.t_start, 5);
        assert!(d.is_valid());
    }

    #[test]
    fn leading_flat_region_is_not_settled() {
        let mut d = vec![0.0, 0.0, 0.0, 0.0];
        d.extend([0.5, -0.9, 0.4, 0.2, 0.01, 0.0, 0.0, 0.0]);
        let det = detect_start_from_differences(d.clone(), &params(0.05, 3, 2));
        assert_eq!(det.index, 8);
        let end = detect_end_from_differences(d, 0, &params(0.05, 3, 2), 14);
        assert_eq!(end.index, 8);
    }

    #[test]
    fn step_range_counts() {
        let r = StepRange::new(5, 31, 50).unwrap();
        assert_eq!(r.width(), 27);
        assert_eq!(StepRange::full(50).width(), 50);
        assert!(StepRange::new(3, 2, 50).is_err());
        assert!(StepRange::new(3, 50, 50).is_err());
    }

    #[test]
    fn cache_staleness() {
        let s = GainSeries::new(GainKind::Structural, vec![0.1; 10], 0.3).unwrap();
        let d = decide(PromptId(1), s.clone(), s, &DetectParams::default()).unwrap();
        let mut cache = ScopeCache::default();
        assert!(cache.is_stale(PromptId(1), 2));
        cache.insert(d);
        assert!(!cache.is_stale(PromptId(1), 2));
        cache.tick();
        assert!(!cache.is_stale(PromptId(1), 2));
        cache.tick();
        assert!(cache.is_stale(PromptId(1), 2));
        assert!(cache.get(PromptId(1)).is_some());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn series() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-1.0f64..1.0, 8..60)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1_000))]
            #[test]
            fn threshold_monotone(values in series(), lo in 0.001f64..1.0, hi in 0.001f64..1.0) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                let gs = GainSeries::new(GainKind::Structural, values, 0.3).unwrap();
                let mk = |rho| DetectParams { rho, ..Default::default() };
                let a = detect_start(&gs, &mk(lo)).unwrap();
                let b = detect_start(&gs, &mk(hi)).unwrap();
                // fallback reports 0 without firing; compare firing positions
                if !a.fallback {
                    prop_assert!(!b.fallback && b.index <= a.index);
                }
            }

            #[test]
            fn rescaling_invariance(values in series(), scale in 0.01f64..100.0) {
                let p = DetectParams::default();
                let a = GainSeries::new(GainKind::Structural, values.clone(), p.ema).unwrap();
                let b = GainSeries::new(GainKind::Structural, values.iter().map(|v| v * scale).collect(), p.ema).unwrap();
                let da = detect_start(&a, &p).unwrap();
                let db = detect_start(&b, &p).unwrap();
                prop_assert_eq!(da.index, db.index);
                let ea = detect_end(&a, da.index, &p).unwrap();
                let eb = detect_end(&b, db.index, &p).unwrap();
                prop_assert_eq!(ea.index, eb.index);
            }

            #[test]
            fn decisions_are_ordered(s in series(), seed_shift in 0usize..5, rho in 0.01f64..1.0, width in 0usize..12) {
                let p = DetectParams { rho, min_width: width, ..Default::default() };
                let n = s.len();
                let other: Vec<f64> = (0..n).map(|k| s[(k + seed_shift) % n] * 0.5).collect();
                let gs = GainSeries::new(GainKind::Structural, s, p.ema).unwrap();
                let gp = GainSeries::new(GainKind::Preference, other, p.ema).unwrap();
                let d = decide(PromptId(0), gs, gp, &p).unwrap();
                prop_assert!(d.t_start <= d.t_end && d.t_end < d.horizon);
                prop_assert!(d.t_end - d.t_start >= p.min_width || d.end.fallback);
            }
        }
    }
}
