//! Test-case generator: oracle labeling, SFT records, preference pairs built
//! by shuffling outputs, and DPO training of a log-linear output model.
//!
//! The generator draws inputs uniformly and models only the outputs. For a
//! triple of inputs, every slot chooses among the same candidate values: the
//! results of combining the ground-truth root's two child values with each
//! operator (or taking either child alone), pooled over the three inputs, plus
//! any outputs already present in the triple. A candidate is described by
//! which of those relations it satisfies on its own slot's input.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    dpo_term, points_loglik, points_loglik_grad, DecisionPoint, FeatureHasher, FeatureVec,
    ModelParams,
};
use crate::minilang::{
    evaluate, evaluate_expr, input_grid, BinOp, Expr, Problem, Program, TestCase, DEFAULT_FUEL,
};
use crate::rng::Rng;

pub type TcgParams = ModelParams;

/// Cases per generated group, and per preference pair.
pub const TRIPLE: usize = 3;

pub const INSTRUCTION: &str =
    "Using the problem and the reference code below, produce three test cases \
as input/output pairs that the code satisfies.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TcgError {
    #[error("all three outputs are equal, so shuffling cannot change them")]
    DegeneratePair,
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged")]
    Divergence,
}

/// What the generator sees: the question and the reference code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub problem_id: String,
    pub question: String,
    pub code: Program,
}

impl Prompt {
    pub fn from_problem(problem: &Problem) -> Self {
        Prompt {
            problem_id: problem.id.clone(),
            question: problem.question.clone(),
            code: problem.ground_truth.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub instruction: String,
    pub question: String,
    pub code_part: Program,
    pub test_part: Vec<TestCase>,
}

impl SftRecord {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "### Instruction\n{}\n\n", self.instruction);
        let _ = write!(out, "### Problem\n{}\n", self.question.trim_end());
        let _ = write!(
            out,
            "\n### Code Part\n{}\n\n### Test Part\n",
            crate::minilang::render_tokens(self.code_part.tokens())
        );
        for c in &self.test_part {
            let _ = writeln!(
                out,
                "input: {} {} {} output: {}",
                c.input[0], c.input[1], c.input[2], c.output
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub x: Prompt,
    pub y_w: Vec<TestCase>,
    pub y_l: Vec<TestCase>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 2.0,
            steps: 100,
        }
    }
}

/// `n` cases with distinct grid inputs, labeled by the ground truth.
pub fn oracle_generate(problem: &Problem, n: usize, rng: &mut Rng) -> Vec<TestCase> {
    let grid = input_grid();
    assert!((1..=grid.len()).contains(&n), "n must be in 1..=1331");
    index::sample(rng, grid.len(), n)
        .iter()
        .map(|i| {
            let input = grid[i];
            let output = evaluate(&problem.ground_truth, input, DEFAULT_FUEL)
                .expect("grid inputs cannot overflow programs within the node limit");
            TestCase { input, output }
        })
        .collect()
}

pub fn build_sft_record(problem: &Problem, rng: &mut Rng) -> SftRecord {
    SftRecord {
        instruction: INSTRUCTION.to_string(),
        question: problem.question.clone(),
        code_part: problem.ground_truth.clone(),
        test_part: oracle_generate(problem, TRIPLE, rng),
    }
}

/// The five non-identity permutations of three positions.
pub const SHUFFLES: [[usize; 3]; 5] = [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Output `i` of the result is output `perm[i]` of `cases`; inputs stay put.
pub fn permute_outputs(cases: &[TestCase], perm: [usize; 3]) -> Vec<TestCase> {
    cases
        .iter()
        .zip(perm)
        .map(|(c, j)| TestCase {
            input: c.input,
            output: cases[j].output,
        })
        .collect()
}

pub fn pair_from_cases(
    problem: &Problem,
    y_w: Vec<TestCase>,
    rng: &mut Rng,
) -> Result<PreferencePair, TcgError> {
    assert_eq!(y_w.len(), TRIPLE);
    if y_w.iter().all(|c| c.output == y_w[0].output) {
        return Err(TcgError::DegeneratePair);
    }
    let y_l = loop {
        let shuffled = permute_outputs(&y_w, SHUFFLES[rng.random_range(0..SHUFFLES.len())]);
        if shuffled != y_w {
            break shuffled;
        }
    };
    Ok(PreferencePair {
        x: Prompt::from_problem(problem),
        y_w,
        y_l,
    })
}

pub fn build_preference_pair(problem: &Problem, rng: &mut Rng) -> Result<PreferencePair, TcgError> {
    let y_w = oracle_generate(problem, TRIPLE, rng);
    pair_from_cases(problem, y_w, rng)
}

const RELATIONS: [&str; 7] = ["+", "-", "*", "min", "max", "left", "right"];

fn relation_values(a: i128, b: i128) -> [Option<i128>; 7] {
    let op = |o: BinOp| o.apply(a, b);
    [
        op(BinOp::Add),
        op(BinOp::Sub),
        op(BinOp::Mul),
        op(BinOp::Min),
        op(BinOp::Max),
        Some(a),
        Some(b),
    ]
}

/// The root operator symbol and the root's child values on `input`.
fn root_view(code: &Program, input: [i64; 3]) -> (&'static str, i128, i128) {
    let value =
        |e: &Expr| evaluate_expr(e, input, DEFAULT_FUEL).expect("grid inputs cannot overflow");
    match code.ast() {
        Expr::Bin(op, l, r) => (op.symbol(), value(l), value(r)),
        leaf => {
            let v = value(leaf);
            ("leaf", v, v)
        }
    }
}

fn candidate_features(hasher: &FeatureHasher, root: &str, a: i128, b: i128, v: i128) -> FeatureVec {
    let mut fb = FeatureVec::builder(hasher);
    let mut any = false;
    for (name, rv) in RELATIONS.iter().zip(relation_values(a, b)) {
        if rv == Some(v) {
            fb.on(&[b"rel", root.as_bytes(), name.as_bytes()]);
            fb.on(&[b"rel-any", name.as_bytes()]);
            any = true;
        }
    }
    if !any {
        fb.on(&[b"other-slot"]);
    }
    fb.build()
}

/// Candidate outputs and per-slot candidate features for a group of inputs.
pub struct SlotModel {
    pub candidates: Vec<i128>,
    pub features: Vec<Vec<FeatureVec>>,
}

impl SlotModel {
    pub fn new(
        hasher: &FeatureHasher,
        code: &Program,
        inputs: &[[i64; 3]],
        extra: &[i128],
    ) -> Self {
        let views: Vec<_> = inputs.iter().map(|&i| root_view(code, i)).collect();
        let mut candidates: Vec<i128> = views
            .iter()
            .flat_map(|&(_, a, b)| relation_values(a, b).into_iter().flatten())
            .chain(extra.iter().copied())
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let features = views
            .iter()
            .map(|&(root, a, b)| {
                candidates
                    .iter()
                    .map(|&v| candidate_features(hasher, root, a, b, v))
                    .collect()
            })
            .collect();
        SlotModel {
            candidates,
            features,
        }
    }

    fn points(&self, cases: &[TestCase]) -> Vec<DecisionPoint> {
        cases
            .iter()
            .zip(&self.features)
            .map(|(c, f)| DecisionPoint {
                features: f.clone(),
                chosen: self
                    .candidates
                    .binary_search(&c.output)
                    .expect("outputs are candidates"),
            })
            .collect()
    }
}

fn triple_points(hasher: &FeatureHasher, x: &Prompt, y: &[TestCase]) -> Vec<DecisionPoint> {
    let inputs: Vec<[i64; 3]> = y.iter().map(|c| c.input).collect();
    let outputs: Vec<i128> = y.iter().map(|c| c.output).collect();
    SlotModel::new(hasher, &x.code, &inputs, &outputs).points(y)
}

/// `ln p(y | x)`: the sum over slots of each chosen output's log-probability.
pub fn tcg_loglik(params: &TcgParams, x: &Prompt, y: &[TestCase]) -> f64 {
    points_loglik(params, &triple_points(&params.hasher, x, y))
}

/// A pair reduced to its decision points; winner and loser share features.
struct PairPoints {
    w: Vec<DecisionPoint>,
    l: Vec<DecisionPoint>,
}

fn pair_points(hasher: &FeatureHasher, pair: &PreferencePair) -> PairPoints {
    let w = triple_points(hasher, &pair.x, &pair.y_w);
    let l = triple_points(hasher, &pair.x, &pair.y_l);
    PairPoints { w, l }
}

fn dpo_on_points(
    params: &TcgParams,
    reference: &TcgParams,
    batch: &[PairPoints],
    beta: f64,
) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    for p in batch {
        let delta = (points_loglik(params, &p.w) - points_loglik(reference, &p.w))
            - (points_loglik(params, &p.l) - points_loglik(reference, &p.l));
        let (l, dl) = dpo_term(beta, delta);
        loss += l / n;
        points_loglik_grad(params, &p.w, dl / n, &mut grad);
        points_loglik_grad(params, &p.l, -dl / n, &mut grad);
    }
    (loss, grad)
}

/// Mean DPO loss over the batch and its gradient in `params`.
pub fn dpo_loss(
    params: &TcgParams,
    reference: &TcgParams,
    batch: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<(f64, Vec<f64>), TcgError> {
    if batch.is_empty() {
        return Err(TcgError::EmptyBatch);
    }
    let points: Vec<PairPoints> = batch
        .iter()
        .map(|p| pair_points(&params.hasher, p))
        .collect();
    Ok(dpo_on_points(params, reference, &points, cfg.beta))
}

/// Gradient descent on the DPO loss. Returns the trained parameters and the
/// loss before each step; `reference` is only read.
pub fn train_tcg(
    params: &TcgParams,
    reference: &TcgParams,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<(TcgParams, Vec<f64>), TcgError> {
    if pairs.is_empty() {
        return Err(TcgError::EmptyBatch);
    }
    let points: Vec<PairPoints> = pairs
        .iter()
        .map(|p| pair_points(&params.hasher, p))
        .collect();
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (loss, grad) = dpo_on_points(&current, reference, &points, cfg.beta);
        if !loss.is_finite() {
            return Err(TcgError::Divergence);
        }
        trace.push(loss);
        current.add_scaled(&grad, -cfg.learning_rate);
    }
    if !current.is_finite() {
        return Err(TcgError::Divergence);
    }
    Ok((current, trace))
}

/// Anything that can propose labeled test cases for a problem.
pub trait CaseGenerator {
    fn generate(&self, problem: &Problem, n: usize, rng: &mut Rng) -> Vec<TestCase>;
}

pub struct OracleGenerator;

impl CaseGenerator for OracleGenerator {
    fn generate(&self, problem: &Problem, n: usize, rng: &mut Rng) -> Vec<TestCase> {
        oracle_generate(problem, n, rng)
    }
}

/// Samples outputs from the learned model, one triple of inputs at a time.
pub struct TcgModel<'a> {
    pub params: &'a TcgParams,
}

impl CaseGenerator for TcgModel<'_> {
    fn generate(&self, problem: &Problem, n: usize, rng: &mut Rng) -> Vec<TestCase> {
        let grid = input_grid();
        let inputs: Vec<[i64; 3]> = index::sample(rng, grid.len(), n)
            .iter()
            .map(|i| grid[i])
            .collect();
        let mut out = Vec::with_capacity(n);
        for group in inputs.chunks(TRIPLE) {
            let model = SlotModel::new(&self.params.hasher, &problem.ground_truth, group, &[]);
            for (input, feats) in group.iter().zip(&model.features) {
                let point = DecisionPoint {
                    features: feats.clone(),
                    chosen: 0,
                };
                let probs = point.log_probs(self.params).into_iter().map(f64::exp);
                let pick = WeightedIndex::new(probs)
                    .expect("softmax weights are positive")
                    .sample(rng);
                out.push(TestCase {
                    input: *input,
                    output: model.candidates[pick],
                });
            }
        }
        out
    }
}

/// Fraction of generated cases whose output matches the ground truth.
pub fn tcg_pass_rate<G: CaseGenerator + ?Sized>(
    generator: &G,
    problems: &[Problem],
    per_problem: usize,
    rng: &mut Rng,
) -> f64 {
    let mut total = 0usize;
    let mut good = 0usize;
    for p in problems {
        for c in generator.generate(p, per_problem, rng) {
            total += 1;
            if evaluate(&p.ground_truth, c.input, DEFAULT_FUEL) == Ok(c.output) {
                good += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        good as f64 / total as f64
    }
}
