//! Process reward model: scores reasoning prefixes, trained point-wise
//! (cross-entropy on node values) or pair-wise (Bradley-Terry on siblings).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    accumulate, dpo_term, log_sigmoid, sigmoid, FeatureHasher, FeatureVec, ModelParams,
};
use crate::mcts::SearchTree;
use crate::minilang::Problem;
use crate::policy::{step_features, Grammar, PlanState, PolicyError, ReasoningStep};

pub type PrmParams = ModelParams;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrmError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged")]
    Divergence,
    #[error("no problem with id {0}")]
    UnknownProblem(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Point,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointwiseSample {
    pub problem_id: String,
    pub prefix: Vec<ReasoningStep>,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseSample {
    pub problem_id: String,
    pub shared_prefix: Vec<ReasoningStep>,
    pub step_win: ReasoningStep,
    pub step_lose: ReasoningStep,
}

pub const DEFAULT_MIN_VISITS: u64 = 2;
pub const DEFAULT_MARGIN: f64 = 0.05;

/// Features of a prefix: those of its last step taken from the state before
/// it, plus a bias. The empty prefix has only the bias and a marker.
pub fn prefix_features(
    hasher: &FeatureHasher,
    grammar: &Grammar,
    problem: &Problem,
    prefix: &[ReasoningStep],
) -> Result<FeatureVec, PolicyError> {
    let Some((last, head)) = prefix.split_last() else {
        return Ok(FeatureVec::builder(hasher)
            .on(&[b"bias"])
            .on(&[b"empty-prefix"])
            .build());
    };
    let state = PlanState::replay(grammar, head)?;
    let mut entries = step_features(hasher, problem, &state, last)
        .entries()
        .to_vec();
    entries.push((hasher.index(&[b"bias"]), 1.0));
    Ok(FeatureVec::from_entries(entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmModel {
    pub grammar: Grammar,
    pub params: PrmParams,
}

impl PrmModel {
    pub fn zeros(grammar: Grammar, hasher: FeatureHasher) -> Self {
        PrmModel {
            grammar,
            params: ModelParams::zeros(hasher),
        }
    }

    /// `w . f(prefix)`, passed through a sigmoid when `normalized`.
    pub fn score(
        &self,
        problem: &Problem,
        prefix: &[ReasoningStep],
        normalized: bool,
    ) -> Result<f64, PolicyError> {
        let raw = self.params.dot(&prefix_features(
            &self.params.hasher,
            &self.grammar,
            problem,
            prefix,
        )?);
        Ok(if normalized { sigmoid(raw) } else { raw })
    }
}

pub fn prm_score(
    model: &PrmModel,
    problem: &Problem,
    prefix: &[ReasoningStep],
    normalized: bool,
) -> Result<f64, PolicyError> {
    model.score(problem, prefix, normalized)
}

/// Whether each node has a fully-passing terminal at or below it.
fn passing_below(tree: &SearchTree) -> Vec<bool> {
    let mut pass: Vec<bool> = tree
        .nodes
        .iter()
        .map(|n| n.report.is_some_and(|r| r.all_passed()))
        .collect();
    // Children always come after their parent in the arena.
    for id in (0..tree.len()).rev() {
        if pass[id] {
            if let Some(p) = tree.nodes[id].parent {
                pass[p] = true;
            }
        }
    }
    pass
}

pub fn extract_pointwise(
    trees: &[SearchTree],
    mode: LabelMode,
    min_visits: u64,
) -> Vec<PointwiseSample> {
    let mut out = Vec::new();
    for tree in trees {
        let hard = passing_below(tree);
        for (id, node) in tree.nodes.iter().enumerate() {
            if node.visits < min_visits.max(1) {
                continue;
            }
            let v = match mode {
                LabelMode::Soft => node.value_sum / node.visits as f64,
                LabelMode::Hard => f64::from(u8::from(hard[id])),
            };
            out.push(PointwiseSample {
                problem_id: tree.problem_id.clone(),
                prefix: tree.prefix(id),
                v,
            });
        }
    }
    out
}

pub fn extract_pairwise(trees: &[SearchTree], min_visits: u64, margin: f64) -> Vec<PairwiseSample> {
    let mut out = Vec::new();
    for tree in trees {
        for (id, node) in tree.nodes.iter().enumerate() {
            let kids: Vec<(usize, f64)> = node
                .children
                .iter()
                .map(|&c| &tree.nodes[c])
                .zip(&node.children)
                .filter(|(n, _)| n.visits >= min_visits.max(1))
                .map(|(n, &c)| (c, n.value_sum / n.visits as f64))
                .collect();
            if kids.len() < 2 {
                continue;
            }
            let shared = tree.prefix(id);
            for &(a, va) in &kids {
                for &(b, vb) in &kids {
                    if a != b && va - vb >= margin && va > vb {
                        out.push(PairwiseSample {
                            problem_id: tree.problem_id.clone(),
                            shared_prefix: shared.clone(),
                            step_win: tree.nodes[a].step.clone().expect("children carry steps"),
                            step_lose: tree.nodes[b].step.clone().expect("children carry steps"),
                        });
                    }
                }
            }
        }
    }
    out
}

fn problem_map(problems: &[Problem]) -> BTreeMap<&str, &Problem> {
    problems.iter().map(|p| (p.id.as_str(), p)).collect()
}

fn lookup<'a>(map: &BTreeMap<&str, &'a Problem>, id: &str) -> Result<&'a Problem, PrmError> {
    map.get(id)
        .copied()
        .ok_or_else(|| PrmError::UnknownProblem(id.to_string()))
}

/// Point samples reduced to `(features, label)`.
pub fn featurize_points(
    model: &PrmModel,
    problems: &[Problem],
    batch: &[PointwiseSample],
) -> Result<Vec<(FeatureVec, f64)>, PrmError> {
    let map = problem_map(problems);
    batch
        .iter()
        .map(|s| {
            let p = lookup(&map, &s.problem_id)?;
            Ok((
                prefix_features(&model.params.hasher, &model.grammar, p, &s.prefix)?,
                s.v,
            ))
        })
        .collect()
}

/// Pair samples reduced to `(winner features, loser features)`.
pub fn featurize_pairs(
    model: &PrmModel,
    problems: &[Problem],
    batch: &[PairwiseSample],
) -> Result<Vec<(FeatureVec, FeatureVec)>, PrmError> {
    let map = problem_map(problems);
    batch
        .iter()
        .map(|s| {
            let p = lookup(&map, &s.problem_id)?;
            let with = |step: &ReasoningStep| {
                let mut prefix = s.shared_prefix.clone();
                prefix.push(step.clone());
                prefix_features(&model.params.hasher, &model.grammar, p, &prefix)
            };
            Ok((with(&s.step_win)?, with(&s.step_lose)?))
        })
        .collect()
}

/// Mean binary cross-entropy between labels and sigmoid scores.
pub fn pointwise_loss_on(
    params: &PrmParams,
    data: &[(FeatureVec, f64)],
) -> Result<(f64, Vec<f64>), PrmError> {
    if data.is_empty() {
        return Err(PrmError::EmptyBatch);
    }
    let n = data.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for (f, v) in data {
        let z = params.dot(f);
        // ln r = ln sigmoid(z), ln(1 - r) = ln sigmoid(-z).
        loss -= (v * log_sigmoid(z) + (1.0 - v) * log_sigmoid(-z)) / n;
        accumulate(&mut grad, f, (sigmoid(z) - v) / n);
    }
    Ok((loss, grad))
}

/// Mean `-ln sigmoid(r_win - r_lose)` on raw scores.
pub fn pairwise_loss_on(
    params: &PrmParams,
    data: &[(FeatureVec, FeatureVec)],
) -> Result<(f64, Vec<f64>), PrmError> {
    if data.is_empty() {
        return Err(PrmError::EmptyBatch);
    }
    let n = data.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for (w, l) in data {
        let (term, d) = dpo_term(1.0, params.dot(w) - params.dot(l));
        loss += term / n;
        accumulate(&mut grad, w, d / n);
        accumulate(&mut grad, l, -d / n);
    }
    Ok((loss, grad))
}

pub fn pointwise_loss(
    model: &PrmModel,
    problems: &[Problem],
    batch: &[PointwiseSample],
) -> Result<(f64, Vec<f64>), PrmError> {
    pointwise_loss_on(&model.params, &featurize_points(model, problems, batch)?)
}

pub fn pairwise_loss(
    model: &PrmModel,
    problems: &[Problem],
    batch: &[PairwiseSample],
) -> Result<(f64, Vec<f64>), PrmError> {
    pairwise_loss_on(&model.params, &featurize_pairs(model, problems, batch)?)
}

/// Training data for either objective.
#[derive(Debug, Clone, Copy)]
pub enum PrmData<'a> {
    Point(&'a [PointwiseSample]),
    Pair(&'a [PairwiseSample]),
}

/// Gradient descent; returns the loss before each step.
pub fn train_prm(
    model: &mut PrmModel,
    problems: &[Problem],
    data: PrmData<'_>,
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>, PrmError> {
    enum Prepared {
        Point(Vec<(FeatureVec, f64)>),
        Pair(Vec<(FeatureVec, FeatureVec)>),
    }
    let prepared = match data {
        PrmData::Point([]) | PrmData::Pair([]) => return Err(PrmError::EmptyDataset),
        PrmData::Point(b) => Prepared::Point(featurize_points(model, problems, b)?),
        PrmData::Pair(b) => Prepared::Pair(featurize_pairs(model, problems, b)?),
    };
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = match &prepared {
            Prepared::Point(d) => pointwise_loss_on(&model.params, d)?,
            Prepared::Pair(d) => pairwise_loss_on(&model.params, d)?,
        };
        if !loss.is_finite() {
            return Err(PrmError::Divergence);
        }
        trace.push(loss);
        model.params.add_scaled(&grad, -lr);
    }
    if !model.params.is_finite() {
        return Err(PrmError::Divergence);
    }
    Ok(trace)
}
