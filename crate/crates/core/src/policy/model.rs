use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::analysis::{joint_consistent, reachable, Reach};
use super::grammar::{Grammar, Plan, PlanState, ReasoningStep, Trajectory};
use super::PolicyError;
use crate::features::{
    log_softmax, points_loglik, points_loglik_grad, DecisionPoint, FeatureHasher, FeatureVec,
    ModelParams,
};
use crate::minilang::Problem;
use crate::rng::Rng;

/// Completion spaces up to this size get the exact joint-consistency feature.
pub const JOINT_BUDGET: u64 = 1024;

/// Features of taking `step` in `state`, computed from the problem's visible
/// examples. Shared by the policy and the process reward model.
pub fn step_features(
    hasher: &FeatureHasher,
    problem: &Problem,
    state: &PlanState,
    step: &ReasoningStep,
) -> FeatureVec {
    let mut b = FeatureVec::builder(hasher);
    let next: Option<Plan> = match (state, step) {
        (_, ReasoningStep::DefineStructure { skeleton }) => {
            b.on(&[b"kind", b"define"]);
            b.on(&[b"shape", skeleton.to_string().as_bytes()]);
            Some(Plan::new(skeleton.clone()))
        }
        (PlanState::Planning(plan), ReasoningStep::RefinePseudocode { hole, filler }) => {
            let depth = plan.skeleton().slot_depth(*hole) as u8;
            let sym = filler.to_string();
            b.on(&[b"kind", b"refine"]);
            b.on(&[b"filler", sym.as_bytes()]);
            b.on(&[b"fill-depth", &[depth], sym.as_bytes()]);
            plan.with_fill(*hole, *filler).ok()
        }
        (PlanState::Planning(plan), ReasoningStep::EmitCode { .. }) => {
            b.on(&[b"kind", b"emit"]);
            Some(plan.clone())
        }
        _ => {
            b.on(&[b"kind", b"other"]);
            None
        }
    };
    if let Some(plan) = next {
        let examples = &problem.examples;
        if !examples.is_empty() {
            let (mut no, mut unknown) = (0usize, 0usize);
            for c in examples {
                match reachable(&plan, c) {
                    Reach::Yes => {}
                    Reach::No => no += 1,
                    Reach::Unknown => unknown += 1,
                }
            }
            if no > 0 {
                b.on(&[b"reach", b"some-no"]);
                b.value(&[b"reach-no-frac"], no as f64 / examples.len() as f64);
            } else if unknown > 0 {
                b.on(&[b"reach", b"unknown"]);
            } else {
                b.on(&[b"reach", b"all"]);
            }
            match joint_consistent(&plan, examples, JOINT_BUDGET) {
                Some(true) => b.on(&[b"joint", b"yes"]),
                Some(false) => b.on(&[b"joint", b"no"]),
                None => &mut b,
            };
        }
    }
    b.build()
}

/// Candidates at one decision point with their probabilities.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub candidates: Vec<ReasoningStep>,
    pub log_probs: Vec<f64>,
}

impl StepDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Highest-probability candidate, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        if self.len() == 1 {
            return 0;
        }
        WeightedIndex::new(self.probs())
            .map(|w| w.sample(rng))
            .unwrap_or_else(|_| self.argmax())
    }
}

/// Anything that can put a distribution over the next step.
pub trait StepPolicy: Sync {
    fn grammar(&self) -> &Grammar;

    fn distribution_at(
        &self,
        problem: &Problem,
        state: &PlanState,
    ) -> Result<StepDistribution, PolicyError>;

    fn step_distribution(
        &self,
        problem: &Problem,
        prefix: &[ReasoningStep],
    ) -> Result<StepDistribution, PolicyError> {
        let state = PlanState::replay(self.grammar(), prefix)?;
        self.distribution_at(problem, &state)
    }
}

/// The featurized softmax step policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyModel {
    pub grammar: Grammar,
    pub params: ModelParams,
}

impl PolicyModel {
    pub fn zeros(grammar: Grammar, hasher: FeatureHasher) -> Self {
        PolicyModel {
            grammar,
            params: ModelParams::zeros(hasher),
        }
    }

    pub fn random(grammar: Grammar, hasher: FeatureHasher, scale: f64, rng: &mut Rng) -> Self {
        PolicyModel {
            grammar,
            params: ModelParams::random(hasher, scale, rng),
        }
    }

    pub fn featurize(
        &self,
        problem: &Problem,
        state: &PlanState,
    ) -> Result<(Vec<ReasoningStep>, Vec<FeatureVec>), PolicyError> {
        let candidates = self.grammar.candidates_for(state)?;
        let features = candidates
            .iter()
            .map(|c| step_features(&self.params.hasher, problem, state, c))
            .collect();
        Ok((candidates, features))
    }

    /// Decision points of a step sequence. Forced steps (a truncation emit)
    /// and single-candidate steps carry no choice and are skipped.
    pub fn decision_points(
        &self,
        problem: &Problem,
        steps: &[ReasoningStep],
    ) -> Result<Vec<DecisionPoint>, PolicyError> {
        let mut state = PlanState::Start;
        let mut points = Vec::new();
        for step in steps {
            let candidates = self.grammar.candidates_for(&state)?;
            match candidates.iter().position(|c| c == step) {
                Some(chosen) if candidates.len() > 1 => {
                    let features = candidates
                        .iter()
                        .map(|c| step_features(&self.params.hasher, problem, &state, c))
                        .collect();
                    points.push(DecisionPoint { features, chosen });
                }
                Some(_) => {}
                None if state.forced_emit(&self.grammar).as_ref() == Some(step) => {}
                None => {
                    return Err(PolicyError::InvalidPrefix(format!(
                        "step not offered: {step}"
                    )))
                }
            }
            state = state.advance(&self.grammar, step)?;
        }
        Ok(points)
    }

    /// `ln pi(steps | problem)`; forced steps count as probability one.
    pub fn trajectory_loglik(
        &self,
        problem: &Problem,
        steps: &[ReasoningStep],
    ) -> Result<f64, PolicyError> {
        Ok(points_loglik(
            &self.params,
            &self.decision_points(problem, steps)?,
        ))
    }
}

impl StepPolicy for PolicyModel {
    fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    fn distribution_at(
        &self,
        problem: &Problem,
        state: &PlanState,
    ) -> Result<StepDistribution, PolicyError> {
        let (candidates, features) = self.featurize(problem, state)?;
        let scores: Vec<f64> = features.iter().map(|f| self.params.dot(f)).collect();
        Ok(StepDistribution {
            candidates,
            log_probs: log_softmax(&scores),
        })
    }
}

/// A sampled trajectory with the log-probability of each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub step_logprobs: Vec<f64>,
}

fn roll<P: StepPolicy + ?Sized>(
    policy: &P,
    problem: &Problem,
    max_steps: usize,
    mut choose: impl FnMut(&StepDistribution) -> usize,
) -> Result<SampledTrajectory, PolicyError> {
    let grammar = *policy.grammar();
    let mut state = PlanState::Start;
    let mut steps = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        if let PlanState::Done(code) = &state {
            let trajectory = Trajectory {
                problem_id: problem.id.clone(),
                steps,
                final_code: code.clone(),
            };
            return Ok(SampledTrajectory {
                trajectory,
                step_logprobs: logprobs,
            });
        }
        let dist = policy.distribution_at(problem, &state)?;
        let (step, lp) = if steps.len() + 1 >= max_steps
            && dist.candidates[0].kind() != super::ActionKind::EmitCode
        {
            (state.forced_emit(&grammar).expect("not done"), 0.0)
        } else {
            let i = choose(&dist);
            (dist.candidates[i].clone(), dist.log_probs[i])
        };
        state = state.advance(&grammar, &step)?;
        steps.push(step);
        logprobs.push(lp);
    }
}

/// Samples steps until EmitCode; at `max_steps` the current plan is emitted
/// with default fills.
pub fn sample_trajectory<P: StepPolicy + ?Sized>(
    policy: &P,
    problem: &Problem,
    rng: &mut Rng,
    max_steps: usize,
) -> Result<SampledTrajectory, PolicyError> {
    roll(policy, problem, max_steps.max(2), |d| d.sample(rng))
}

/// Argmax decoding with lowest-index tie-breaks.
pub fn greedy_trajectory<P: StepPolicy + ?Sized>(
    policy: &P,
    problem: &Problem,
    max_steps: usize,
) -> Result<SampledTrajectory, PolicyError> {
    roll(policy, problem, max_steps.max(2), StepDistribution::argmax)
}

/// A D+ trajectory paired with its problem.
#[derive(Debug, Clone, Copy)]
pub struct SftExample<'a> {
    pub problem: &'a Problem,
    pub trajectory: &'a Trajectory,
}

/// Negative mean trajectory log-likelihood and its gradient.
pub fn sft_loss(
    model: &PolicyModel,
    dataset: &[SftExample<'_>],
) -> Result<(f64, Vec<f64>), PolicyError> {
    let points = sft_points(model, dataset)?;
    Ok(sft_loss_on_points(&model.params, &points))
}

fn sft_points(
    model: &PolicyModel,
    dataset: &[SftExample<'_>],
) -> Result<Vec<Vec<DecisionPoint>>, PolicyError> {
    if dataset.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    dataset
        .iter()
        .map(|ex| model.decision_points(ex.problem, &ex.trajectory.steps))
        .collect()
}

fn sft_loss_on_points(params: &ModelParams, points: &[Vec<DecisionPoint>]) -> (f64, Vec<f64>) {
    let n = points.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let total: f64 = points
        .iter()
        .map(|p| points_loglik_grad(params, p, -1.0 / n, &mut grad))
        .sum();
    (-total / n, grad)
}

/// Gradient descent on the SFT loss. Returns the loss before each step.
pub fn train_sft(
    model: &mut PolicyModel,
    dataset: &[SftExample<'_>],
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>, PolicyError> {
    let points = sft_points(model, dataset)?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = sft_loss_on_points(&model.params, &points);
        if !loss.is_finite() {
            return Err(PolicyError::Divergence);
        }
        trace.push(loss);
        model.params.add_scaled(&grad, -lr);
    }
    if !model.params.is_finite() {
        return Err(PolicyError::Divergence);
    }
    Ok(trace)
}
