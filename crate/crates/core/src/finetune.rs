//! Clipped policy-gradient fine-tuning of the denoiser restricted to a scope
//! of MDP steps.
//!
//! Each round rolls out `M` trajectories per prompt, scores the final samples,
//! standardizes rewards per step within each prompt group and takes
//! `inner_epochs` passes of the clipped surrogate
//!
//! `L = −(1/N) Σ_i Σ_{k ∈ scope(z_i)} min(ρ_{i,k} A_{i,k}, clip(ρ_{i,k}, 1−c, 1+c) A_{i,k})`
//!
//! with `ρ = exp(log π_θ(a|s) − log π_old(a|s))`. Steps outside the scope are
//! never evaluated, so they contribute exactly nothing to the gradient.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    gaussian_log_density, mean_eps_coefficient, sample_batch, transition_mean, Adam, DenoiserModel, EpsPredictor,
    PromptId, GRAD_CHUNKS,
};
use crate::error::{Error, Result};
use crate::mdp::{time_for_step, to_mdp, MdpTrajectory, RewardScheme};
use crate::reward::{diversity_metric, AlignmentFn, RewardFn};
use crate::rng::SeedTree;
use crate::schedule::NoiseSchedule;
use crate::scope::{select_scope, DetectParams, ScopeCache, ScopeDecision, StepRange};

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScopeMode {
    Adaptive,
    Full,
    Fixed { start: usize, end: usize },
}

impl fmt::Display for ScopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeMode::Adaptive => write!(f, "adaptive"),
            ScopeMode::Full => write!(f, "full"),
            ScopeMode::Fixed { start, end } => write!(f, "fixed:{start},{end}"),
        }
    }
}

impl FromStr for ScopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(ScopeMode::Adaptive),
            "full" => Ok(ScopeMode::Full),
            other => {
                let bad = || Error::Config(format!("scope must be adaptive, full or fixed:A,B; got {other:?}"));
                let rest = other.strip_prefix("fixed:").ok_or_else(bad)?;
                let (a, b) = rest.split_once(',').ok_or_else(bad)?;
                let start = a.trim().parse().map_err(|_| bad())?;
                let end = b.trim().parse().map_err(|_| bad())?;
                if start > end {
                    return Err(Error::Config(format!("fixed scope start {start} exceeds end {end}")));
                }
                Ok(ScopeMode::Fixed { start, end })
            }
        }
    }
}

impl TryFrom<String> for ScopeMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScopeMode> for String {
    fn from(m: ScopeMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub scope: ScopeMode,
    pub rounds: usize,
    /// Rollouts per prompt per round (`M`).
    pub trajectories_per_prompt: usize,
    pub inner_epochs: usize,
    /// Adam updates per epoch; the batch is shuffled and split evenly.
    pub minibatches: usize,
    pub clip: f64,
    pub lr: f64,
    pub reward_scheme: RewardScheme,
    /// Samples per prompt for the evaluation after the last round.
    pub eval_samples_per_prompt: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            scope: ScopeMode::Adaptive,
            rounds: 40,
            trajectories_per_prompt: 32,
            inner_epochs: 2,
            minibatches: 1,
            clip: 0.2,
            lr: 1e-3,
            reward_scheme: RewardScheme::Backfilled,
            eval_samples_per_prompt: 128,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.trajectories_per_prompt < 2 {
            problems.push("finetune.trajectories_per_prompt must be >= 2".to_string());
        }
        if self.inner_epochs == 0 {
            problems.push("finetune.inner_epochs must be >= 1".to_string());
        }
        if self.minibatches == 0 {
            problems.push("finetune.minibatches must be >= 1".to_string());
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            problems.push(format!("finetune.clip must be in (0, 1), got {}", self.clip));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("finetune.lr must be positive, got {}", self.lr));
        }
        if self.eval_samples_per_prompt < 2 {
            problems.push("finetune.eval_samples_per_prompt must be >= 2".to_string());
        }
        if let ScopeMode::Fixed { start, end } = self.scope {
            if StepRange::new(start, end, horizon).is_err() {
                problems.push(format!("fixed scope [{start}, {end}] outside 0..={}", horizon - 1));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys(problems))
        }
    }
}

/// Standardizes `rewards` within each prompt group using the population
/// standard deviation. A group whose rewards are all equal gets exactly zero.
pub fn compute_advantages(rewards: &[f64], groups: &[PromptId]) -> Result<Vec<f64>> {
    if rewards.len() != groups.len() {
        return Err(Error::Invalid("rewards and groups differ in length".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut seen: Vec<PromptId> = groups.to_vec();
    seen.sort();
    seen.dedup();
    for g in seen {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        if idx.len() < 2 {
            return Err(Error::Invalid(format!("prompt group {g} has a single trajectory")));
        }
        let first = rewards[idx[0]];
        if idx.iter().all(|&i| rewards[i] == first) {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| rewards[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (rewards[i] - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + ADVANTAGE_EPS;
        for &i in &idx {
            out[i] = (rewards[i] - mean) / denom;
        }
    }
    Ok(out)
}

/// Per-step advantages `A[i][k]` for a batch with rewards assigned.
pub fn step_advantages(trajs: &[MdpTrajectory]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = trajs.first() else {
        return Err(Error::EmptyBatch("advantages need trajectories"));
    };
    let horizon = first.horizon();
    let groups: Vec<PromptId> = trajs.iter().map(|t| t.prompt).collect();
    let rewards: Vec<&[f64]> = trajs
        .iter()
        .map(|t| {
            t.rewards()
                .filter(|r| r.len() == horizon)
                .ok_or_else(|| Error::Invalid("trajectory without rewards of full horizon".into()))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![vec![0.0; horizon]; trajs.len()];
    for k in 0..horizon {
        let column: Vec<f64> = rewards.iter().map(|r| r[k]).collect();
        for (row, a) in out.iter_mut().zip(compute_advantages(&column, &groups)?) {
            row[k] = a;
        }
    }
    Ok(out)
}

/// One trajectory's contribution to the surrogate.
#[derive(Debug, Clone, Copy)]
pub struct PolicySample<'a> {
    pub traj: &'a MdpTrajectory,
    pub advantages: &'a [f64],
    pub scope: StepRange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Transitions evaluated (trajectory × in-scope step).
    pub steps_touched: u64,
    /// Fraction of evaluated transitions where the clipped branch was active.
    pub clip_fraction: f64,
}

struct Partial {
    loss: f64,
    grad: Vec<f64>,
    touched: u64,
    clipped: u64,
}

fn surrogate_chunk(
    model: &DenoiserModel,
    s: &NoiseSchedule,
    items: &[PolicySample<'_>],
    clip: f64,
    scale: f64,
) -> Partial {
    let mut p = Partial {
        loss: 0.0,
        grad: vec![0.0; model.param_count()],
        touched: 0,
        clipped: 0,
    };
    for item in items {
        let traj = item.traj;
        let horizon = traj.horizon();
        for k in item.scope.steps() {
            let step = &traj.steps[k];
            let t = time_for_step(horizon, k);
            let cache = model.forward(&step.state, t, traj.prompt);
            let mean = transition_mean(s, &step.state, t, &cache.output);
            let log_new = gaussian_log_density(&step.action, &mean, step.variance);
            let ratio = (log_new - step.log_prob).exp();
            let adv = item.advantages[k];
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            p.touched += 1;
            let coef = if unclipped <= clipped {
                p.loss -= unclipped * scale;
                -scale * ratio * adv
            } else {
                p.loss -= clipped * scale;
                p.clipped += 1;
                0.0
            };
            if coef == 0.0 {
                continue;
            }
            let c = coef * mean_eps_coefficient(s, t) / step.variance;
            let d_out: Vec<f64> = step.action.iter().zip(&mean).map(|(a, m)| c * (a - m)).collect();
            model.backward(&cache, &d_out, &mut p.grad);
        }
    }
    p
}

/// Loss and parameter gradient of the clipped surrogate over `items`.
/// The reduction order is fixed, so results do not depend on thread count.
pub fn policy_gradient(
    model: &DenoiserModel,
    s: &NoiseSchedule,
    items: &[PolicySample<'_>],
    clip: f64,
) -> Result<SurrogateEval> {
    if items.is_empty() {
        return Err(Error::EmptyBatch("policy gradient needs trajectories"));
    }
    for item in items {
        if item.scope.end >= item.traj.horizon() || item.advantages.len() != item.traj.horizon() {
            return Err(Error::Invalid("scope or advantages do not match trajectory horizon".into()));
        }
    }
    let scale = 1.0 / items.len() as f64;
    let chunk = items.len().div_ceil(GRAD_CHUNKS);
    let partials: Vec<Partial> = items
        .par_chunks(chunk)
        .map(|c| surrogate_chunk(model, s, c, clip, scale))
        .collect();
    let mut out = SurrogateEval {
        loss: 0.0,
        grad: vec![0.0; model.param_count()],
        steps_touched: 0,
        clip_fraction: 0.0,
    };
    let mut clipped = 0;
    for p in partials {
        out.loss += p.loss;
        for (a, b) in out.grad.iter_mut().zip(&p.grad) {
            *a += b;
        }
        out.steps_touched += p.touched;
        clipped += p.clipped;
    }
    if out.steps_touched > 0 {
        out.clip_fraction = clipped as f64 / out.steps_touched as f64;
    }
    Ok(out)
}

/// Surrogate loss only.
pub fn surrogate_loss(model: &DenoiserModel, s: &NoiseSchedule, items: &[PolicySample<'_>], clip: f64) -> Result<f64> {
    policy_gradient(model, s, items, clip).map(|e| e.loss)
}

/// Computes the surrogate gradient and applies one Adam update.
pub fn policy_gradient_step(
    model: &mut DenoiserModel,
    adam: &mut Adam,
    s: &NoiseSchedule,
    items: &[PolicySample<'_>],
    clip: f64,
) -> Result<SurrogateEval> {
    let eval = policy_gradient(model, s, items, clip)?;
    if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: adam.steps_taken() as usize,
            detail: format!("non-finite surrogate (loss = {})", eval.loss),
        });
    }
    adam.step(model.params_mut(), &eval.grad);
    if !model.all_finite() {
        return Err(Error::Training {
            step: adam.steps_taken() as usize,
            detail: "non-finite parameters after update".into(),
        });
    }
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Cumulative trajectory-step gradient evaluations so far.
    pub grad_steps_cum: u64,
    /// Scope boundaries averaged over prompts.
    pub scope_start: f64,
    pub scope_end: f64,
    pub diversity: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_reward: f64,
    pub std_reward: f64,
    /// Per-prompt diversity averaged over prompts.
    pub diversity: f64,
    pub per_prompt_reward: Vec<f64>,
    pub per_prompt_diversity: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: DenoiserModel,
    pub rounds: Vec<RoundMetrics>,
    /// Scope used for each prompt in each round.
    pub scopes: Vec<Vec<StepRange>>,
    /// Every adaptive scope decision, in the order it was made.
    pub decisions: Vec<(usize, ScopeDecision)>,
    pub evaluation: EvalSummary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn grouped_by_prompt(prompts: usize, per_prompt: usize) -> Vec<PromptId> {
    (0..prompts).flat_map(|z| std::iter::repeat_n(PromptId(z), per_prompt)).collect()
}

/// Samples `per_prompt` final samples for every prompt and scores them
/// without touching any reward normalization state.
pub fn evaluate<P: EpsPredictor + ?Sized>(
    model: &P,
    s: &NoiseSchedule,
    reward: &RewardFn,
    prompts: usize,
    per_prompt: usize,
    tree: &SeedTree,
    label: &str,
) -> Result<EvalSummary> {
    let ids = grouped_by_prompt(prompts, per_prompt);
    let trajs = sample_batch(model, s, &ids, tree, label)?;
    let rewards: Vec<f64> = trajs.iter().map(|t| reward.score(t.final_sample(), t.prompt)).collect();
    let (mean_reward, std_reward) = mean_std(&rewards);
    let mut per_prompt_reward = Vec::with_capacity(prompts);
    let mut per_prompt_diversity = Vec::with_capacity(prompts);
    for z in 0..prompts {
        let range = z * per_prompt..(z + 1) * per_prompt;
        per_prompt_reward.push(mean_std(&rewards[range.clone()]).0);
        let finals: Vec<Vec<f64>> = trajs[range].iter().map(|t| t.final_sample().to_vec()).collect();
        per_prompt_diversity.push(diversity_metric(&finals)?);
    }
    Ok(EvalSummary {
        mean_reward,
        std_reward,
        diversity: per_prompt_diversity.iter().sum::<f64>() / prompts as f64,
        per_prompt_reward,
        per_prompt_diversity,
    })
}

/// Everything a fine-tuning run needs besides the model itself.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneSetup<'a> {
    pub schedule: &'a NoiseSchedule,
    pub alignment: &'a AlignmentFn,
    pub detect: &'a DetectParams,
    pub config: &'a FinetuneConfig,
    pub seed: u64,
}

/// Runs `config.rounds` rounds of scoped policy-gradient fine-tuning and a
/// final evaluation. `on_round` sees each round's metrics and the updated
/// model; an error from it aborts the run.
pub fn finetune<F>(
    mut model: DenoiserModel,
    reward: &mut RewardFn,
    setup: FinetuneSetup<'_>,
    mut on_round: F,
) -> Result<FinetuneOutcome>
where
    F: FnMut(&RoundMetrics, &DenoiserModel) -> Result<()>,
{
    let FinetuneSetup {
        schedule: s,
        alignment,
        detect,
        config: cfg,
        seed,
    } = setup;
    let horizon = s.steps();
    cfg.validate(horizon)?;
    if cfg.scope == ScopeMode::Adaptive {
        detect.validate()?;
    }
    let prompts = model.dims().prompts;
    let tree = SeedTree::new(seed);
    let mut adam = Adam::new(model.param_count(), cfg.lr);
    let mut cache = ScopeCache::default();
    let mut grad_steps: u64 = 0;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut scope_history = Vec::with_capacity(cfg.rounds);
    let mut decisions = Vec::new();
    let ids = grouped_by_prompt(prompts, cfg.trajectories_per_prompt);

    for round in 0..cfg.rounds {
        let clock = Instant::now();
        let scopes: Vec<StepRange> = match cfg.scope {
            ScopeMode::Full => vec![StepRange::full(horizon); prompts],
            ScopeMode::Fixed { start, end } => vec![StepRange::new(start, end, horizon)?; prompts],
            ScopeMode::Adaptive => {
                let mut out = Vec::with_capacity(prompts);
                for z in (0..prompts).map(PromptId) {
                    if cache.is_stale(z, detect.refresh_every) {
                        let label = format!("probe/{round}/{z}");
                        let d = select_scope(&model, s, z, alignment, reward, detect, &tree, &label)?;
                        decisions.push((round, d.clone()));
                        cache.insert(d);
                    }
                    out.push(cache.get(z).expect("scope just inserted").range());
                }
                out
            }
        };

        let trajs = sample_batch(&model, s, &ids, &tree, &format!("rollout/{round}"))?;
        let finals: Vec<(&[f64], PromptId)> = trajs.iter().map(|t| (t.final_sample(), t.prompt)).collect();
        let rewards = reward.score_batch(&finals);
        let mdps: Vec<MdpTrajectory> = trajs
            .iter()
            .zip(&rewards)
            .map(|(t, r)| to_mdp(t)?.assign_reward(cfg.reward_scheme, *r))
            .collect::<Result<_>>()?;
        let advantages = step_advantages(&mdps)?;
        let samples: Vec<PolicySample<'_>> = mdps
            .iter()
            .zip(&advantages)
            .map(|(traj, adv)| PolicySample {
                traj,
                advantages: adv,
                scope: scopes[traj.prompt.0],
            })
            .collect();

        let mut loss = 0.0;
        let mut clip_fraction = 0.0;
        let mut updates = 0usize;
        for epoch in 0..cfg.inner_epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            if cfg.minibatches > 1 {
                order.shuffle(&mut tree.stream(&format!("shuffle/{round}/{epoch}")));
            }
            let size = samples.len().div_ceil(cfg.minibatches);
            for idx in order.chunks(size) {
                let batch: Vec<PolicySample<'_>> = idx.iter().map(|&i| samples[i]).collect();
                let eval = policy_gradient_step(&mut model, &mut adam, s, &batch, cfg.clip)?;
                grad_steps += eval.steps_touched;
                loss += eval.loss;
                clip_fraction += eval.clip_fraction;
                updates += 1;
            }
        }

        let (mean_reward, std_reward) = mean_std(&rewards);
        let mut diversity = 0.0;
        for z in 0..prompts {
            let per = cfg.trajectories_per_prompt;
            let group: Vec<Vec<f64>> = trajs[z * per..(z + 1) * per].iter().map(|t| t.final_sample().to_vec()).collect();
            diversity += diversity_metric(&group)?;
        }
        let metrics = RoundMetrics {
            round,
            mean_reward,
            std_reward,
            grad_steps_cum: grad_steps,
            scope_start: scopes.iter().map(|r| r.start as f64).sum::<f64>() / prompts as f64,
            scope_end: scopes.iter().map(|r| r.end as f64).sum::<f64>() / prompts as f64,
            diversity: diversity / prompts as f64,
            loss: loss / updates as f64,
            clip_fraction: clip_fraction / updates as f64,
            wallclock_s: clock.elapsed().as_secs_f64(),
        };
        on_round(&metrics, &model)?;
        rounds.push(metrics);
        scope_history.push(scopes);
        cache.tick();
    }

    let evaluation = evaluate(&model, s, reward, prompts, cfg.eval_samples_per_prompt, &tree, "eval")?;
    Ok(FinetuneOutcome {
        model,
        rounds,
        scopes: scope_history,
        decisions,
        evaluation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_trajectory, ModelDims, ToyDataModel};
    use crate::reward::TargetProximity;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::cosine(20, 0.008).unwrap()
    }

    fn model(steps: usize) -> DenoiserModel {
        DenoiserModel::new(ModelDims::new(2, 2, steps), &mut SeedTree::new(11).stream("init")).unwrap()
    }

    fn batch(m: &DenoiserModel, s: &NoiseSchedule, scheme: RewardScheme) -> Vec<MdpTrajectory> {
        let tree = SeedTree::new(5);
        (0..6)
            .map(|i| {
                let z = PromptId(i % 2);
                let t = sample_trajectory(m, s, z, &mut tree.stream(&format!("b/{i}"))).unwrap();
                let r = t.final_sample()[0] + 0.3 * i as f64;
                to_mdp(&t).unwrap().assign_reward(scheme, r).unwrap()
            })
            .collect()
    }

    fn perturbed(m: &DenoiserModel, amount: f64) -> DenoiserModel {
        let mut p = m.clone();
        for (i, w) in p.params_mut().iter_mut().enumerate() {
            *w += amount * ((i as f64 * 0.37).sin());
        }
        p
    }

    fn samples<'a>(trajs: &'a [MdpTrajectory], adv: &'a [Vec<f64>], scope: StepRange) -> Vec<PolicySample<'a>> {
        trajs
            .iter()
            .zip(adv)
            .map(|(traj, a)| PolicySample {
                traj,
                advantages: a,
                scope,
            })
            .collect()
    }

    #[test]
    fn advantages_hand_values() {
        let a = compute_advantages(&[0.0, 2.0], &[PromptId(0); 2]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        let b = compute_advantages(&[1.0, 1.0, 1.0], &[PromptId(0); 3]).unwrap();
        assert_eq!(b, vec![0.0; 3]);
        let c = compute_advantages(&[0.1, 0.1, 0.1], &[PromptId(0); 3]).unwrap();
        assert_eq!(c, vec![0.0; 3]);
        assert!(compute_advantages(&[1.0, 2.0, 3.0], &[PromptId(0), PromptId(0), PromptId(1)]).is_err());
    }

    #[test]
    fn advantages_are_grouped() {
        let g = [PromptId(0), PromptId(1), PromptId(0), PromptId(1)];
        let a = compute_advantages(&[0.0, 10.0, 2.0, 30.0], &g).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[2] - 1.0).abs() < 1e-7);
        assert!((a[1] + 1.0).abs() < 1e-7 && (a[3] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn scope_mode_parsing() {
        assert_eq!("adaptive".parse::<ScopeMode>().unwrap(), ScopeMode::Adaptive);
        assert_eq!("full".parse::<ScopeMode>().unwrap(), ScopeMode::Full);
        assert_eq!(
            "fixed:10,40".parse::<ScopeMode>().unwrap(),
            ScopeMode::Fixed { start: 10, end: 40 }
        );
        for bad in ["fixed:4", "fixed:9,3", "partial", "fixed:a,b"] {
            assert!(bad.parse::<ScopeMode>().is_err(), "{bad}");
        }
        let m = ScopeMode::Fixed { start: 1, end: 2 };
        assert_eq!(m.to_string().parse::<ScopeMode>().unwrap(), m);
    }

    #[test]
    fn ratio_is_one_at_behavior_policy() {
        let s = schedule();
        let m = model(20);
        let trajs = batch(&m, &s, RewardScheme::Backfilled);
        let adv = step_advantages(&trajs).unwrap();
        let items = samples(&trajs, &adv, StepRange::full(20));
        let eval = policy_gradient(&m, &s, &items, 0.2).unwrap();
        assert_eq!(eval.clip_fraction, 0.0);
        assert_eq!(eval.steps_touched, 6 * 20);
        // with ratio 1 the loss is −mean Σ_k A, and A sums to 0 per group
        assert!(eval.loss.abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = schedule();
        let m = model(20);
        let trajs = batch(&m, &s, RewardScheme::Backfilled);
        let adv = step_advantages(&trajs).unwrap();
        let items = samples(&trajs, &adv, StepRange::new(3, 12, 20).unwrap());
        // generous clip keeps every term on the smooth branch
        let p = perturbed(&m, 2e-3);
        let eval = policy_gradient(&p, &s, &items, 0.9).unwrap();
        let h = 1e-4;
        let errors: Vec<f64> = (0..p.param_count())
            .step_by(7)
            .map(|idx| {
                let mut plus = p.clone();
                plus.params_mut()[idx] += h;
                let mut minus = p.clone();
                minus.params_mut()[idx] -= h;
                let lp = surrogate_loss(&plus, &s, &items, 0.9).unwrap();
                let lm = surrogate_loss(&minus, &s, &items, 0.9).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                (fd - eval.grad[idx]).abs() / fd.abs().max(eval.grad[idx].abs()).max(1e-6)
            })
            .collect();
        let within = errors.iter().filter(|e| **e <= 1e-4).count() as f64 / errors.len() as f64;
        let worst = errors.iter().cloned().fold(0.0, f64::max);
        assert!(within >= 0.95 && worst <= 1e-3, "within {within}, worst {worst}");
    }

    #[test]
    fn out_of_scope_steps_get_no_gradient() {
        let s = schedule();
        let m = model(20);
        let trajs = batch(&m, &s, RewardScheme::Backfilled);
        let adv = step_advantages(&trajs).unwrap();
        let p = perturbed(&m, 1e-2);
        // zeroing advantages outside the scope must match restricting the scope
        let masked: Vec<Vec<f64>> = adv
            .iter()
            .map(|a| a.iter().enumerate().map(|(k, v)| if (4..=9).contains(&k) { *v } else { 0.0 }).collect())
            .collect();
        let full = policy_gradient(&p, &s, &samples(&trajs, &masked, StepRange::full(20)), 0.2).unwrap();
        let scoped = policy_gradient(&p, &s, &samples(&trajs, &adv, StepRange::new(4, 9, 20).unwrap()), 0.2).unwrap();
        assert_eq!(full.grad, scoped.grad);
        assert_eq!(scoped.steps_touched, 6 * 6);
    }

    #[test]
    fn sparse_full_equals_final_step_scope() {
        let s = schedule();
        let m = model(20);
        let trajs = batch(&m, &s, RewardScheme::Sparse);
        let adv = step_advantages(&trajs).unwrap();
        assert!(adv.iter().all(|a| a[..19].iter().all(|v| *v == 0.0)));
        let p = perturbed(&m, 1e-2);
        let full = policy_gradient(&p, &s, &samples(&trajs, &adv, StepRange::full(20)), 0.2).unwrap();
        let last = policy_gradient(&p, &s, &samples(&trajs, &adv, StepRange::new(19, 19, 20).unwrap()), 0.2).unwrap();
        assert_eq!(full.grad, last.grad);
        assert!(last.grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn finetune_is_deterministic() {
        let s = schedule();
        let data = ToyDataModel::on_circle(2, 2, 2.0, 0.3).unwrap();
        let align = AlignmentFn::from_data(&data, 0.5).unwrap();
        let detect = DetectParams {
            probe_batch: 4,
            ..Default::default()
        };
        let cfg = FinetuneConfig {
            rounds: 3,
            trajectories_per_prompt: 4,
            eval_samples_per_prompt: 4,
            ..Default::default()
        };
        let setup = FinetuneSetup {
            schedule: &s,
            alignment: &align,
            detect: &detect,
            config: &cfg,
            seed: 9,
        };
        let reward = RewardFn::Proximity(TargetProximity::offset_from(&data, &[0.5, 0.5], 0.5).unwrap());
        let run = || {
            let mut r = reward.clone();
            let mut seen = 0;
            let out = finetune(model(20), &mut r, setup, |_, _| {
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, 3);
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        let strip = |rs: &[RoundMetrics]| rs.iter().map(|r| (r.mean_reward, r.grad_steps_cum, r.diversity)).collect::<Vec<_>>();
        assert_eq!(strip(&a.rounds), strip(&b.rounds));
        assert_eq!(a.evaluation, b.evaluation);
        // one decision per prompt in round 0 only (refresh every 5)
        assert_eq!(a.decisions.len(), 2);
        let per_round: u64 = a.scopes[0].iter().map(|r| r.width() as u64 * 4 * 2).sum();
        assert_eq!(a.rounds[0].grad_steps_cum, per_round);
    }

    #[test]
    fn full_scope_counts_every_step() {
        let s = schedule();
        let data = ToyDataModel::on_circle(2, 2, 2.0, 0.3).unwrap();
        let align = AlignmentFn::from_data(&data, 0.5).unwrap();
        let cfg = FinetuneConfig {
            scope: ScopeMode::Full,
            rounds: 2,
            trajectories_per_prompt: 4,
            eval_samples_per_prompt: 4,
            minibatches: 2,
            ..Default::default()
        };
        let setup = FinetuneSetup {
            schedule: &s,
            alignment: &align,
            detect: &DetectParams::default(),
            config: &cfg,
            seed: 1,
        };
        let mut reward = RewardFn::Norm {
            sign: crate::reward::NormSign::Compress,
        };
        let out = finetune(model(20), &mut reward, setup, |_, _| Ok(())).unwrap();
        assert_eq!(out.rounds[1].grad_steps_cum, 2 * 2 * 8 * 20);
        assert!(out.decisions.is_empty());
    }
}
