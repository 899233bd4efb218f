//! Policy improvement from blended outcome and process rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    dpo_term, l2_norm, points_loglik, points_loglik_grad, DecisionPoint, ModelParams,
};
use crate::minilang::{run_tests, Problem, TestCase, DEFAULT_FUEL};
use crate::policy::{sample_trajectory, PolicyError, PolicyModel, Trajectory};
use crate::prm::PrmModel;
use crate::rng::Rng;
use crate::tcg::{CaseGenerator, TRIPLE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RlError {
    #[error("no step rewards to aggregate")]
    EmptyRewards,
    #[error("empty batch")]
    EmptyBatch,
    #[error("every problem's episodes tie in aggregated reward")]
    NoPairs,
    #[error("update diverged")]
    Divergence,
    #[error("no problem with id {0}")]
    UnknownProblem(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSchedule {
    pub kind: ScheduleKind,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub horizon: u64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            kind: ScheduleKind::Linear,
            alpha_start: 1.0,
            alpha_end: 0.3,
            horizon: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub tau_pass: f64,
    pub tau_fail: f64,
    pub gamma: f64,
    pub schedule: AlphaSchedule,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau_pass: 1.0,
            tau_fail: 0.0,
            gamma: 0.95,
            schedule: AlphaSchedule::default(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        let s = &self.schedule;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err("gamma must lie in [0, 1]".into());
        }
        if self.tau_pass.partial_cmp(&self.tau_fail) != Some(std::cmp::Ordering::Greater) {
            return Err("tau_pass must exceed tau_fail".into());
        }
        if !(0.0..=1.0).contains(&s.alpha_start) || !(0.0..=1.0).contains(&s.alpha_end) {
            return Err("alpha_start and alpha_end must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// `alpha(t)`, moving from `alpha_start` to `alpha_end` over `horizon` steps.
pub fn alpha_at(s: &AlphaSchedule, t: u64) -> f64 {
    let progress = if s.horizon == 0 {
        1.0
    } else {
        match s.kind {
            ScheduleKind::Linear => t as f64 / s.horizon as f64,
            ScheduleKind::Logarithmic => (t as f64).ln_1p() / (s.horizon as f64).ln_1p(),
        }
    };
    if progress >= 1.0 {
        return s.alpha_end;
    }
    let a = s.alpha_start + (s.alpha_end - s.alpha_start) * progress;
    let (lo, hi) = if s.alpha_end <= s.alpha_start {
        (s.alpha_end, s.alpha_start)
    } else {
        (s.alpha_start, s.alpha_end)
    };
    a.clamp(lo, hi)
}

/// `tau_pass` when the code compiles and matches every case, else `tau_fail`.
pub fn outcome_reward(
    code: &[crate::minilang::Token],
    cases: &[TestCase],
    cfg: &RewardConfig,
) -> f64 {
    if run_tests(code, cases, DEFAULT_FUEL).all_passed() {
        cfg.tau_pass
    } else {
        cfg.tau_fail
    }
}

/// `alpha(t) R + (1 - alpha(t)) / m * sum_j gamma^j r_j`, with `j` from 1.
pub fn aggregate(
    outcome: f64,
    step_rewards: &[f64],
    t: u64,
    cfg: &RewardConfig,
) -> Result<f64, RlError> {
    if step_rewards.is_empty() {
        return Err(RlError::EmptyRewards);
    }
    let a = alpha_at(&cfg.schedule, t);
    let m = step_rewards.len() as f64;
    let mut discount = 1.0;
    let mut process = 0.0;
    for r in step_rewards {
        discount *= cfg.gamma;
        process += discount * r;
    }
    Ok(a * outcome + (1.0 - a) * process / m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub step_rewards: Vec<f64>,
    pub outcome: f64,
    pub aggregated: f64,
    pub step_logprobs: Vec<f64>,
    /// Schedule step the episode was scored at.
    pub t: u64,
    pub tcg_cases: Vec<TestCase>,
}

/// Samples a trajectory, scores every prefix with the PRM, and checks the
/// code against three generated cases.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<G: CaseGenerator + ?Sized>(
    policy: &PolicyModel,
    prm: &PrmModel,
    tcg: &G,
    problem: &Problem,
    rng: &mut Rng,
    t: u64,
    cfg: &RewardConfig,
    max_steps: usize,
) -> Result<EpisodeRecord, RlError> {
    let sampled = sample_trajectory(policy, problem, rng, max_steps)?;
    let steps = &sampled.trajectory.steps;
    let step_rewards = (1..=steps.len())
        .map(|j| prm.score(problem, &steps[..j], true))
        .collect::<Result<Vec<f64>, PolicyError>>()?;
    let tcg_cases = tcg.generate(problem, TRIPLE, rng);
    let outcome = outcome_reward(&sampled.trajectory.final_code, &tcg_cases, cfg);
    let aggregated = aggregate(outcome, &step_rewards, t, cfg)?;
    Ok(EpisodeRecord {
        trajectory: sampled.trajectory,
        step_rewards,
        outcome,
        aggregated,
        step_logprobs: sampled.step_logprobs,
        t,
        tcg_cases,
    })
}

/// An episode reduced to its decision points and aggregated reward.
#[derive(Debug, Clone)]
pub struct ScoredPoints {
    pub points: Vec<DecisionPoint>,
    pub reward: f64,
}

fn problem_for<'a>(map: &BTreeMap<&str, &'a Problem>, id: &str) -> Result<&'a Problem, RlError> {
    map.get(id)
        .copied()
        .ok_or_else(|| RlError::UnknownProblem(id.to_string()))
}

pub fn score_points(
    policy: &PolicyModel,
    problems: &[Problem],
    episodes: &[EpisodeRecord],
) -> Result<Vec<ScoredPoints>, RlError> {
    let map: BTreeMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    episodes
        .iter()
        .map(|e| {
            let p = problem_for(&map, &e.trajectory.problem_id)?;
            Ok(ScoredPoints {
                points: policy.decision_points(p, &e.trajectory.steps)?,
                reward: e.aggregated,
            })
        })
        .collect()
}

/// The surrogate `(1/n) sum_i (phi_i - mean phi) ln pi(tau_i)` and its gradient.
pub fn reinforce_surrogate(
    params: &ModelParams,
    batch: &[ScoredPoints],
) -> Result<(f64, Vec<f64>), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let baseline = batch.iter().map(|e| e.reward).sum::<f64>() / n;
    let mut grad = vec![0.0; params.dim()];
    let mut value = 0.0;
    for e in batch {
        let adv = (e.reward - baseline) / n;
        value += adv * points_loglik_grad(params, &e.points, adv, &mut grad);
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_phi: f64,
    pub grad_norm: f64,
}

/// One gradient-ascent step on the REINFORCE surrogate.
pub fn reinforce_update(
    policy: &PolicyModel,
    problems: &[Problem],
    episodes: &[EpisodeRecord],
    lr: f64,
) -> Result<(PolicyModel, UpdateStats), RlError> {
    let batch = score_points(policy, problems, episodes)?;
    reinforce_step(policy, &batch, lr)
}

pub fn reinforce_step(
    policy: &PolicyModel,
    batch: &[ScoredPoints],
    lr: f64,
) -> Result<(PolicyModel, UpdateStats), RlError> {
    let (_, grad) = reinforce_surrogate(&policy.params, batch)?;
    let mut next = policy.clone();
    next.params.add_scaled(&grad, lr);
    if !next.params.is_finite() {
        return Err(RlError::Divergence);
    }
    let mean_phi = batch.iter().map(|e| e.reward).sum::<f64>() / batch.len() as f64;
    Ok((
        next,
        UpdateStats {
            mean_phi,
            grad_norm: l2_norm(&grad),
        },
    ))
}

/// Highest- against lowest-reward episode for every problem with a strict gap.
pub fn trajectory_pairs(episodes: &[EpisodeRecord]) -> Vec<(usize, usize)> {
    let mut by_problem: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in episodes.iter().enumerate() {
        by_problem
            .entry(&e.trajectory.problem_id)
            .or_default()
            .push(i);
    }
    let mut pairs = Vec::new();
    for idx in by_problem.values() {
        // First index wins ties within the best and within the worst.
        let best = idx.iter().copied().fold(idx[0], |b, i| {
            if episodes[i].aggregated > episodes[b].aggregated {
                i
            } else {
                b
            }
        });
        let worst = idx.iter().copied().fold(idx[0], |w, i| {
            if episodes[i].aggregated < episodes[w].aggregated {
                i
            } else {
                w
            }
        });
        if episodes[best].aggregated > episodes[worst].aggregated {
            pairs.push((best, worst));
        }
    }
    pairs
}

/// Mean DPO loss over trajectory pairs, on precomputed decision points.
pub fn trajectory_dpo_loss(
    params: &ModelParams,
    reference: &ModelParams,
    pairs: &[(Vec<DecisionPoint>, Vec<DecisionPoint>)],
    beta: f64,
) -> Result<(f64, Vec<f64>), RlError> {
    if pairs.is_empty() {
        return Err(RlError::NoPairs);
    }
    let n = pairs.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for (w, l) in pairs {
        let delta = (points_loglik(params, w) - points_loglik(reference, w))
            - (points_loglik(params, l) - points_loglik(reference, l));
        let (term, d) = dpo_term(beta, delta);
        loss += term / n;
        points_loglik_grad(params, w, d / n, &mut grad);
        points_loglik_grad(params, l, -d / n, &mut grad);
    }
    Ok((loss, grad))
}

/// Iterative DPO round: pairs from `episodes`, reference frozen. Returns the
/// updated policy and the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn iterative_dpo_update(
    policy: &PolicyModel,
    reference: &ModelParams,
    problems: &[Problem],
    episodes: &[EpisodeRecord],
    beta: f64,
    lr: f64,
    steps: usize,
) -> Result<(PolicyModel, Vec<f64>), RlError> {
    let idx = trajectory_pairs(episodes);
    if idx.is_empty() {
        return Err(RlError::NoPairs);
    }
    let scored = score_points(policy, problems, episodes)?;
    let pairs: Vec<_> = idx
        .iter()
        .map(|&(w, l)| (scored[w].points.clone(), scored[l].points.clone()))
        .collect();
    let mut next = policy.clone();
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = trajectory_dpo_loss(&next.params, reference, &pairs, beta)?;
        if !loss.is_finite() {
            return Err(RlError::Divergence);
        }
        trace.push(loss);
        next.params.add_scaled(&grad, -lr);
    }
    if !next.params.is_finite() {
        return Err(RlError::Divergence);
    }
    Ok((next, trace))
}
