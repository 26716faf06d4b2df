//! Denoising as a Markov decision process.
//!
//! MDP step `k ∈ {0..T−1}` has state `s_k = (z, x_{T−k})` and action
//! `a_k = x_{T−k−1}`. Rewards are attached after the rollout finishes, either
//! sparsely (terminal step only) or backfilled to every step.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffusion::{PromptId, Trajectory};
use crate::error::{Error, Result};

/// MDP step index for forward time `t`.
pub fn step_for_time(horizon: usize, t: usize) -> usize {
    horizon - t
}

/// Forward time of the state visited at MDP step `k`.
pub fn time_for_step(horizon: usize, k: usize) -> usize {
    horizon - k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardScheme {
    /// Zero everywhere except the terminal step.
    Sparse,
    /// Terminal reward copied to every step.
    Backfilled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpStep {
    pub k: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: f64,
    /// Behavior-policy log-probability of `action`.
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpTrajectory {
    pub prompt: PromptId,
    pub steps: Vec<MdpStep>,
    pub terminal: Vec<f64>,
    rewards: Option<(RewardScheme, Vec<f64>)>,
}

pub fn to_mdp(traj: &Trajectory) -> Result<MdpTrajectory> {
    let horizon = traj.steps();
    if !traj.is_complete() {
        return Err(Error::IncompleteTrajectory {
            expected: traj.states.len().saturating_sub(1),
            found: horizon,
        });
    }
    let steps = (0..horizon)
        .map(|k| MdpStep {
            k,
            state: traj.states[k].clone(),
            action: traj.states[k + 1].clone(),
            mean: traj.means[k].clone(),
            variance: traj.variances[k],
            log_prob: traj.log_probs[k],
        })
        .collect();
    Ok(MdpTrajectory {
        prompt: traj.prompt,
        steps,
        terminal: traj.final_sample().to_vec(),
        rewards: None,
    })
}

impl MdpTrajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn rewards(&self) -> Option<&[f64]> {
        self.rewards.as_ref().map(|(_, r)| r.as_slice())
    }

    pub fn reward_scheme(&self) -> Option<RewardScheme> {
        self.rewards.as_ref().map(|(s, _)| *s)
    }

    /// Terminal reward regardless of scheme.
    pub fn final_reward(&self) -> Option<f64> {
        self.rewards().and_then(|r| r.last().copied())
    }

    pub fn assign_sparse_reward(self, r_final: f64) -> Result<Self> {
        let mut r = vec![0.0; self.horizon()];
        if let Some(last) = r.last_mut() {
            *last = r_final;
        }
        self.assign(RewardScheme::Sparse, r)
    }

    pub fn assign_backfilled_reward(self, r_final: f64) -> Result<Self> {
        let r = vec![r_final; self.horizon()];
        self.assign(RewardScheme::Backfilled, r)
    }

    pub fn assign_reward(self, scheme: RewardScheme, r_final: f64) -> Result<Self> {
        match scheme {
            RewardScheme::Sparse => self.assign_sparse_reward(r_final),
            RewardScheme::Backfilled => self.assign_backfilled_reward(r_final),
        }
    }

    fn assign(mut self, scheme: RewardScheme, r: Vec<f64>) -> Result<Self> {
        if self.rewards.is_some() {
            return Err(Error::RewardAlreadyAssigned);
        }
        self.rewards = Some((scheme, r));
        Ok(self)
    }

    pub fn is_chain_consistent(&self) -> bool {
        self.steps.windows(2).all(|w| w[0].action == w[1].state)
            && self.steps.last().is_some_and(|s| s.action == self.terminal)
    }

    /// Debug dump: one CSV row per step.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(w, "prompt,t,k,state,action,log_prob,reward")?;
        let horizon = self.horizon();
        for step in &self.steps {
            let reward = self
                .rewards()
                .map(|r| r[step.k].to_string())
                .unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.prompt,
                time_for_step(horizon, step.k),
                step.k,
                join(&step.state),
                join(&step.action),
                step.log_prob,
                reward
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{gaussian_log_density, sample_trajectory, DenoiserModel, ModelDims};
    use crate::rng::SeedTree;
    use crate::schedule::NoiseSchedule;

    fn traj(steps: usize, seed: u64) -> Trajectory {
        let s = NoiseSchedule::cosine(steps, 0.008).unwrap();
        let m = DenoiserModel::new(ModelDims::new(2, 2, steps), &mut SeedTree::new(1).stream("i")).unwrap();
        sample_trajectory(&m, &s, PromptId(1), &mut SeedTree::new(seed).stream("r")).unwrap()
    }

    #[test]
    fn index_mapping() {
        let m = to_mdp(&traj(3, 1)).unwrap();
        assert_eq!(m.horizon(), 3);
        assert_eq!(m.steps[0].state, traj(3, 1).states[0]); // x_3
        for k in 0..3 {
            assert_eq!(step_for_time(3, time_for_step(3, k)), k);
        }
        assert!(m.is_chain_consistent());
        assert!(m.rewards().is_none());
    }

    #[test]
    fn incomplete_rejected() {
        let mut t = traj(3, 1);
        t.log_probs.pop();
        assert!(to_mdp(&t).is_err());
    }

    #[test]
    fn sparse_rewards() {
        let m = to_mdp(&traj(3, 2)).unwrap().assign_sparse_reward(1.0).unwrap();
        assert_eq!(m.rewards().unwrap(), &[0.0, 0.0, 1.0]);
        assert_eq!(m.rewards().unwrap().iter().sum::<f64>(), 1.0);
        let z = to_mdp(&traj(3, 2)).unwrap().assign_sparse_reward(0.0).unwrap();
        assert!(z.rewards().unwrap().iter().all(|r| *r == 0.0));
    }

    #[test]
    fn backfilled_rewards() {
        let m = to_mdp(&traj(3, 2)).unwrap().assign_backfilled_reward(1.0).unwrap();
        assert_eq!(m.rewards().unwrap(), &[1.0, 1.0, 1.0]);
        let n = to_mdp(&traj(3, 2)).unwrap().assign_backfilled_reward(-0.5).unwrap();
        assert!(n.rewards().unwrap().iter().all(|r| *r == -0.5));
        let sparse = to_mdp(&traj(3, 2)).unwrap().assign_sparse_reward(-0.5).unwrap();
        assert!(n.rewards().unwrap().iter().all(|r| *r == *sparse.rewards().unwrap().last().unwrap()));
    }

    #[test]
    fn double_assignment_rejected() {
        let m = to_mdp(&traj(3, 2)).unwrap().assign_sparse_reward(1.0).unwrap();
        assert!(matches!(m.assign_backfilled_reward(1.0), Err(Error::RewardAlreadyAssigned)));
    }

    #[test]
    fn schemes_agree_only_at_terminal_step() {
        for r in [0.7, -2.0, 0.0] {
            let a = to_mdp(&traj(10, 4)).unwrap().assign_sparse_reward(r).unwrap();
            let b = to_mdp(&traj(10, 4)).unwrap().assign_backfilled_reward(r).unwrap();
            let (ra, rb) = (a.rewards().unwrap(), b.rewards().unwrap());
            assert_eq!(ra[9], rb[9]);
            for k in 0..9 {
                assert_eq!(ra[k] == rb[k], r == 0.0);
            }
        }
    }

    #[test]
    fn log_probs_recompute() {
        let m = to_mdp(&traj(20, 5)).unwrap();
        for s in &m.steps {
            assert!((gaussian_log_density(&s.action, &s.mean, s.variance) - s.log_prob).abs() <= 1e-9);
        }
    }

    #[test]
    fn dump_has_one_row_per_step() {
        let m = to_mdp(&traj(5, 5)).unwrap().assign_backfilled_reward(0.25).unwrap();
        let mut buf = Vec::new();
        m.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().starts_with("1,5,0,"));
    }
}
