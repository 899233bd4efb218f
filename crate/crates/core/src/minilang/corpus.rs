use std::collections::HashSet;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BinOp, EvalError, Expr, Problem, Program, Token, CONST_MAX, CONST_MIN, NUM_VARS};
use crate::rng::{self, Rng};

pub const GRID_MIN: i64 = -5;
pub const GRID_MAX: i64 = 5;

/// Deepest tree whose node count stays within the 64-node limit.
const MAX_CORPUS_DEPTH: usize = 5;

const NUM_LEAVES: f64 = (NUM_VARS as i32 + (CONST_MAX - CONST_MIN + 1) as i32) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub count: usize,
    pub max_depth: usize,
    /// Hidden cases per problem.
    pub eval_cases: usize,
    /// Visible examples rendered into the question.
    pub shown_examples: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 50,
            max_depth: 2,
            eval_cases: 10,
            shown_examples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("corpus needs count >= 1 and max_depth >= 1")]
    EmptyRequest,
    #[error("max_depth {0} exceeds {MAX_CORPUS_DEPTH}")]
    DepthTooLarge(usize),
    #[error("requested {requested} distinct programs but only {available} exist")]
    ExhaustedSpace { requested: usize, available: f64 },
    #[error("{0} inputs requested from a grid of 1331")]
    GridTooSmall(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// All inputs of `[-5, 5]^3` in lexicographic order.
pub fn input_grid() -> Vec<[i64; 3]> {
    let mut g = Vec::with_capacity(1331);
    for a in GRID_MIN..=GRID_MAX {
        for b in GRID_MIN..=GRID_MAX {
            for c in GRID_MIN..=GRID_MAX {
                g.push([a, b, c]);
            }
        }
    }
    g
}

/// Number of trees (leaf-rooted included) of depth at most `d`.
fn trees_up_to(d: usize) -> f64 {
    (0..d).fold(NUM_LEAVES, |t, _| NUM_LEAVES + 5.0 * t * t)
}

/// Number of operator-rooted trees of depth in `1..=d`.
fn op_rooted_up_to(d: usize) -> f64 {
    5.0 * trees_up_to(d - 1).powi(2)
}

fn sample_leaf(rng: &mut Rng) -> Expr {
    let i = rng.random_range(0..NUM_LEAVES as usize);
    if i < NUM_VARS as usize {
        Expr::Var(i as u8)
    } else {
        Expr::Const(CONST_MIN + (i - NUM_VARS as usize) as i8)
    }
}

fn sample_any(d: usize, rng: &mut Rng) -> Expr {
    if d == 0 || rng.random_bool(NUM_LEAVES / trees_up_to(d)) {
        sample_leaf(rng)
    } else {
        sample_op_rooted(d, rng)
    }
}

/// Uniform over operator-rooted trees of depth `1..=d`: the count factors as
/// `5 * T(d-1)^2`, so a uniform operator over two uniform subtrees is exact.
fn sample_op_rooted(d: usize, rng: &mut Rng) -> Expr {
    let op = BinOp::ALL[rng.random_range(0..5)];
    let l = sample_any(d - 1, rng);
    let r = sample_any(d - 1, rng);
    Expr::bin(op, l, r)
}

/// Generates `spec.count` problems with distinct ground truths. Deterministic in `seed`.
pub fn make_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Problem>, CorpusError> {
    make_problems(spec, seed, "p", &HashSet::new())
}

/// Like [`make_corpus`], but ids carry `id_prefix` and ground truths listed in
/// `exclude` are never produced. Used for fresh self-play batches.
pub fn make_problems(
    spec: &CorpusSpec,
    seed: u64,
    id_prefix: &str,
    exclude: &HashSet<Vec<Token>>,
) -> Result<Vec<Problem>, CorpusError> {
    if spec.count == 0 || spec.max_depth == 0 {
        return Err(CorpusError::EmptyRequest);
    }
    if spec.max_depth > MAX_CORPUS_DEPTH {
        return Err(CorpusError::DepthTooLarge(spec.max_depth));
    }
    let per_problem = spec.eval_cases + spec.shown_examples;
    if per_problem > 1331 {
        return Err(CorpusError::GridTooSmall(per_problem));
    }
    let excluded_here = exclude
        .iter()
        .filter(|t| {
            t.first().is_some_and(|t| t.is_op()) && {
                let depth = super::parse(t).map(|p| p.depth()).unwrap_or(usize::MAX);
                depth <= spec.max_depth
            }
        })
        .count();
    let available = op_rooted_up_to(spec.max_depth) - excluded_here as f64;
    if spec.count as f64 > available {
        return Err(CorpusError::ExhaustedSpace {
            requested: spec.count,
            available,
        });
    }

    let grid = input_grid();
    let mut program_rng = rng::stream(seed, "corpus-programs", 0);
    let mut seen: HashSet<Vec<Token>> = HashSet::new();
    let mut problems = Vec::with_capacity(spec.count);
    while problems.len() < spec.count {
        let program = Program::from_expr(sample_op_rooted(spec.max_depth, &mut program_rng))
            .expect("depth <= 5 keeps trees within the node limit");
        if exclude.contains(program.tokens()) || !seen.insert(program.tokens().to_vec()) {
            continue;
        }
        let k = problems.len();
        let mut case_rng = rng::stream(seed, "corpus-cases", k as u64);
        let picks = index::sample(&mut case_rng, grid.len(), per_problem);
        let inputs: Vec<[i64; 3]> = picks.iter().map(|i| grid[i]).collect();
        let (shown, hidden) = inputs.split_at(spec.shown_examples);
        let id = format!("{id_prefix}{k:04}");
        problems.push(Problem::from_ground_truth(id, program, shown, hidden)?);
    }
    Ok(problems)
}
