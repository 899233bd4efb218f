use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::mcts::SearchTree;
use crate::minilang::{run_tests, Problem, DEFAULT_FUEL};
use crate::policy::{greedy_trajectory, StepPolicy};

/// Fraction of problems whose greedy trajectory passes every hidden case.
pub fn pass_at_1<P: StepPolicy + ?Sized>(
    policy: &P,
    problems: &[Problem],
    max_steps: usize,
) -> f64 {
    if problems.is_empty() {
        return 0.0;
    }
    let solved = problems
        .iter()
        .filter(|p| {
            greedy_trajectory(policy, p, max_steps).is_ok_and(|t| {
                run_tests(&t.trajectory.final_code, &p.eval_cases, DEFAULT_FUEL).all_passed()
            })
        })
        .count();
    solved as f64 / problems.len() as f64
}

fn passes(tree: &SearchTree, id: usize) -> bool {
    tree.nodes[id].report.is_some_and(|r| r.all_passed())
}

/// The node a final decision was taken from. A parent whose only child is
/// the emit (a completed or truncated plan) does not count as a decision, so
/// the search moves one level up.
pub fn final_decision_node(tree: &SearchTree, terminal: usize) -> Option<usize> {
    let parent = tree.nodes[terminal].parent?;
    let p = &tree.nodes[parent];
    match p.parent {
        Some(grand) if p.children.len() == 1 => Some(grand),
        _ => Some(parent),
    }
}

/// Outcome of a final-step expansion: `None` if it does not lead straight to
/// code, else whether that code passed.
fn expansion_outcome(tree: &SearchTree, child: usize) -> Option<bool> {
    let c = &tree.nodes[child];
    if c.is_terminal() {
        return Some(passes(tree, child));
    }
    let emits: Vec<usize> = c
        .children
        .iter()
        .copied()
        .filter(|&k| tree.nodes[k].is_terminal())
        .collect();
    if c.children.len() == 1 && emits.len() == 1 {
        Some(passes(tree, emits[0]))
    } else {
        None
    }
}

/// Per-tree success rate of final-step expansions around correct paths, or
/// `None` when the tree has no fully-passing terminal.
pub fn tree_aspr(tree: &SearchTree) -> Option<f64> {
    let decision_nodes: BTreeSet<usize> = tree
        .terminals()
        .filter(|&t| passes(tree, t))
        .filter_map(|t| final_decision_node(tree, t))
        .collect();
    if decision_nodes.is_empty() {
        return None;
    }
    let ratios: Vec<f64> = decision_nodes
        .iter()
        .map(|&g| {
            let outcomes: Vec<bool> = tree.nodes[g]
                .children
                .iter()
                .filter_map(|&c| expansion_outcome(tree, c))
                .collect();
            outcomes.iter().filter(|&&ok| ok).count() as f64 / outcomes.len() as f64
        })
        .collect();
    Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Mean of [`tree_aspr`] over the trees that have a passing terminal.
pub fn aspr(trees: &[SearchTree]) -> Result<f64, OrchestratorError> {
    let per_tree: Vec<f64> = trees.iter().filter_map(tree_aspr).collect();
    if per_tree.is_empty() {
        return Err(OrchestratorError::NoQualifyingTrees);
    }
    Ok(per_tree.iter().sum::<f64>() / per_tree.len() as f64)
}

/// Stop at the iteration cap, or once held-out Pass@1 has gained less than
/// 0.01 twice in a row. `history` starts with the pre-loop value.
pub fn converged(history: &[f64], iteration: usize, max_iterations: usize) -> bool {
    if iteration >= max_iterations {
        return true;
    }
    let n = history.len();
    n >= 3 && history[n - 1] - history[n - 2] < 0.01 && history[n - 2] - history[n - 3] < 0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub pass_at_1: f64,
    pub aspr: Option<f64>,
    pub tcg_pass_rate: f64,
    pub mean_phi: Option<f64>,
    pub d_process_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub seed: u64,
    pub heldout: Vec<String>,
    /// Held-out Pass@1 of the randomly initialized policy.
    pub baseline_pass_at_1: f64,
    /// Held-out Pass@1 right after SFT.
    pub sft_pass_at_1: f64,
    pub final_pass_at_1: f64,
    pub tcg_pass_rate_uniform: f64,
    pub tcg_pass_rate: f64,
    pub positives: usize,
    pub converged: bool,
    pub iterations: Vec<IterationMetrics>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    iteration: usize,
    pass_at_1: f64,
    aspr: Option<f64>,
    tcg_pass_rate: f64,
    mean_phi: Option<f64>,
}

/// Writes `metrics.csv` and `report.json` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<(), OrchestratorError> {
    if report.iterations.is_empty() {
        return Err(OrchestratorError::Config(
            "report has no metric rows".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    for m in &report.iterations {
        w.serialize(CsvRow {
            iteration: m.iteration,
            pass_at_1: m.pass_at_1,
            aspr: m.aspr,
            tcg_pass_rate: m.tcg_pass_rate,
            mean_phi: m.mean_phi,
        })?;
    }
    w.flush()?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<MetricsReport, OrchestratorError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        dir.join("report.json"),
    )?)?)
}
