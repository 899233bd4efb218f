//! Monte Carlo tree search over reasoning prefixes.
//!
//! Every simulation ends at an EmitCode node, and the whole rollout path is
//! stored in the tree. So each simulation adds exactly one visit to every node
//! on its path, and a non-terminal node's visit count is the sum of its
//! children's.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minilang::{run_tests, PassReport, Problem, Token, DEFAULT_FUEL};
use crate::policy::{ActionKind, PlanState, PolicyError, ReasoningStep, StepPolicy, Trajectory};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MctsError {
    #[error("node {0} has never been visited")]
    Unvisited(usize),
    #[error("invalid search config: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsConfig {
    /// Weight of the compile indicator in the terminal reward.
    pub alpha_mix: f64,
    pub uct_c: f64,
    pub rollouts: usize,
    /// Most steps on any path; the last one is a forced EmitCode.
    pub max_depth: usize,
    pub expansion_width: usize,
    pub fuel: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            alpha_mix: 0.5,
            uct_c: 1.414,
            rollouts: 64,
            max_depth: 16,
            expansion_width: 4,
            fuel: DEFAULT_FUEL,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<(), MctsError> {
        let bad = |m: &str| Err(MctsError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return bad("alpha_mix must lie in [0, 1]");
        }
        if self.rollouts == 0 {
            return bad("rollouts must be at least 1");
        }
        if self.max_depth < 2 {
            return bad("max_depth must be at least 2");
        }
        if self.expansion_width == 0 {
            return bad("expansion_width must be at least 1");
        }
        if !(self.uct_c >= 0.0 && self.uct_c.is_finite()) {
            return bad("uct_c must be finite and non-negative");
        }
        Ok(())
    }
}

/// `alpha * compile + (1 - alpha) * pass_rate`.
pub fn terminal_reward(report: &PassReport, alpha_mix: f64) -> f64 {
    alpha_mix * report.compile_indicator() + (1.0 - alpha_mix) * report.pass_rate
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    /// `None` only at the root.
    pub step: Option<ReasoningStep>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub visits: u64,
    pub value_sum: f64,
    /// Present exactly on EmitCode nodes.
    pub report: Option<PassReport>,
    pub depth: usize,
}

impl SearchNode {
    pub fn is_terminal(&self) -> bool {
        self.report.is_some()
    }
}

/// One simulation: the node ids from the root to the terminal, and the reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecord {
    pub path: Vec<usize>,
    pub reward: f64,
}

type Candidates = (Vec<ReasoningStep>, Vec<f64>);

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub problem_id: String,
    pub nodes: Vec<SearchNode>,
    pub log: Vec<SimulationRecord>,
    /// Policy output per node, valid while one policy drives the search.
    cache: Vec<Option<std::sync::Arc<Candidates>>>,
}

impl PartialEq for SearchTree {
    fn eq(&self, other: &Self) -> bool {
        self.problem_id == other.problem_id && self.nodes == other.nodes && self.log == other.log
    }
}

pub const ROOT: usize = 0;

impl SearchTree {
    pub fn new(problem_id: impl Into<String>) -> Self {
        let root = SearchNode {
            step: None,
            parent: None,
            children: Vec::new(),
            visits: 0,
            value_sum: 0.0,
            report: None,
            depth: 0,
        };
        SearchTree {
            problem_id: problem_id.into(),
            nodes: vec![root],
            log: Vec::new(),
            cache: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[ROOT]
    }

    /// Steps from the root down to `id`.
    pub fn prefix(&self, id: usize) -> Vec<ReasoningStep> {
        let mut steps = Vec::with_capacity(self.nodes[id].depth);
        let mut at = id;
        while let Some(step) = &self.nodes[at].step {
            steps.push(step.clone());
            at = self.nodes[at].parent.expect("non-root nodes have parents");
        }
        steps.reverse();
        steps
    }

    fn add_child(&mut self, parent: usize, step: ReasoningStep) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(SearchNode {
            step: Some(step),
            parent: Some(parent),
            children: Vec::new(),
            visits: 0,
            value_sum: 0.0,
            report: None,
            depth,
        });
        self.nodes[parent].children.push(id);
        id
    }

    pub fn normalized_value(&self, id: usize) -> Result<f64, MctsError> {
        let n = &self.nodes[id];
        if n.visits == 0 {
            return Err(MctsError::Unvisited(id));
        }
        Ok(n.value_sum / n.visits as f64)
    }

    /// Adds one visit and `reward` to every node on `path`.
    pub fn backpropagate(&mut self, path: &[usize], reward: f64) {
        for &id in path {
            let n = &mut self.nodes[id];
            n.visits += 1;
            n.value_sum += reward;
        }
    }

    /// UCT choice among the children of `id`; unvisited children first, then
    /// the highest score, lowest index on ties.
    pub fn select(&self, id: usize, uct_c: f64) -> Option<usize> {
        let node = &self.nodes[id];
        let stats: Vec<(f64, u64)> = node
            .children
            .iter()
            .map(|&c| (self.nodes[c].value_sum, self.nodes[c].visits))
            .collect();
        uct_select(&stats, node.visits, uct_c).map(|i| node.children[i])
    }

    /// Terminal node ids in creation order.
    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_terminal())
            .map(|(i, _)| i)
    }

    pub fn trajectory_to(&self, terminal: usize) -> Option<Trajectory> {
        match &self.nodes[terminal].step {
            Some(ReasoningStep::EmitCode { code }) => Some(Trajectory {
                problem_id: self.problem_id.clone(),
                steps: self.prefix(terminal),
                final_code: code.clone(),
            }),
            _ => None,
        }
    }
}

/// Index into `children` (given as `(W, N)` pairs) chosen by UCT.
pub fn uct_select(children: &[(f64, u64)], parent_visits: u64, uct_c: f64) -> Option<usize> {
    if let Some(i) = children.iter().position(|&(_, n)| n == 0) {
        return Some(i);
    }
    let ln_parent = (parent_visits.max(1) as f64).ln();
    let mut best: Option<(usize, f64)> = None;
    for (i, &(w, n)) in children.iter().enumerate() {
        let score = w / n as f64 + uct_c * (ln_parent / n as f64).sqrt();
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

/// The legal steps at node `id` with their policy probabilities, honoring
/// the depth cap.
fn node_candidates<P: StepPolicy + ?Sized>(
    tree: &mut SearchTree,
    id: usize,
    policy: &P,
    problem: &Problem,
    state: &PlanState,
    cfg: &MctsConfig,
) -> Result<std::sync::Arc<Candidates>, MctsError> {
    if tree.cache.len() < tree.nodes.len() {
        tree.cache.resize(tree.nodes.len(), None);
    }
    if let Some(c) = &tree.cache[id] {
        return Ok(c.clone());
    }
    let forced = if tree.nodes[id].depth + 1 >= cfg.max_depth {
        state.forced_emit(policy.grammar())
    } else {
        None
    };
    let out = match forced {
        Some(step) => (vec![step], vec![1.0]),
        None => {
            let dist = policy.distribution_at(problem, state)?;
            let probs = dist.probs();
            (dist.candidates, probs)
        }
    };
    let out = std::sync::Arc::new(out);
    tree.cache[id] = Some(out.clone());
    Ok(out)
}

fn pick(weights: &[f64], rng: &mut Rng) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    match WeightedIndex::new(weights) {
        Ok(w) => w.sample(rng),
        Err(_) => 0,
    }
}

/// Runs one selection/expansion/rollout/backpropagation pass. Returns the
/// path and its reward.
pub fn simulate<P: StepPolicy + ?Sized>(
    tree: &mut SearchTree,
    problem: &Problem,
    policy: &P,
    rng: &mut Rng,
    cfg: &MctsConfig,
) -> Result<(Vec<usize>, f64), MctsError> {
    let grammar = *policy.grammar();
    let mut path = vec![ROOT];
    let mut at = ROOT;
    let mut state = PlanState::Start;

    // Selection, until a node that can still take a new child, or a terminal.
    let mut expand_here = false;
    while !tree.nodes[at].is_terminal() {
        let cand = node_candidates(tree, at, policy, problem, &state, cfg)?;
        let (cands, probs) = (&cand.0, &cand.1);
        let node = &tree.nodes[at];
        if node.children.len() < cfg.expansion_width.min(cands.len()) {
            // Expansion: an untried candidate, drawn from the renormalized policy.
            let tried: Vec<&ReasoningStep> = node
                .children
                .iter()
                .filter_map(|&c| tree.nodes[c].step.as_ref())
                .collect();
            let weights: Vec<f64> = cands
                .iter()
                .zip(probs)
                .map(|(c, &p)| {
                    if tried.contains(&c) {
                        0.0
                    } else {
                        p.max(1e-300)
                    }
                })
                .collect();
            let step = cands[pick(&weights, rng)].clone();
            state = state.advance(&grammar, &step)?;
            at = tree.add_child(at, step);
            path.push(at);
            expand_here = true;
            break;
        }
        at = tree
            .select(at, cfg.uct_c)
            .expect("expanded nodes have children");
        state = state.advance(&grammar, tree.nodes[at].step.as_ref().expect("child step"))?;
        path.push(at);
    }

    // Rollout with the policy, storing every step.
    if expand_here {
        while !matches!(state, PlanState::Done(_)) {
            let cand = node_candidates(tree, at, policy, problem, &state, cfg)?;
            let step = cand.0[pick(&cand.1, rng)].clone();
            state = state.advance(&grammar, &step)?;
            at = tree.add_child(at, step);
            path.push(at);
        }
    }

    let reward = match (&tree.nodes[at].report, &state) {
        (Some(report), _) => terminal_reward(report, cfg.alpha_mix),
        (None, PlanState::Done(code)) => {
            let report = run_tests(code, &problem.eval_cases, cfg.fuel);
            tree.nodes[at].report = Some(report);
            terminal_reward(&report, cfg.alpha_mix)
        }
        _ => unreachable!("simulations end at emitted code"),
    };
    tree.backpropagate(&path, reward);
    tree.log.push(SimulationRecord {
        path: path.clone(),
        reward,
    });
    Ok((path, reward))
}

/// A value-labeled prefix: one per tree node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSample {
    pub problem_id: String,
    pub prefix: Vec<ReasoningStep>,
    pub v: f64,
    pub terminal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_code: Option<Vec<Token>>,
    pub visits: u64,
}

pub fn process_samples(tree: &SearchTree) -> Result<Vec<ProcessSample>, MctsError> {
    (0..tree.len())
        .map(|id| {
            let node = &tree.nodes[id];
            let final_code = match (&node.step, node.is_terminal()) {
                (Some(ReasoningStep::EmitCode { code }), true) => Some(code.clone()),
                _ => None,
            };
            Ok(ProcessSample {
                problem_id: tree.problem_id.clone(),
                prefix: tree.prefix(id),
                v: tree.normalized_value(id)?,
                terminal: node.is_terminal(),
                final_code,
                visits: node.visits,
            })
        })
        .collect()
}

/// Runs `cfg.rollouts` simulations on a fresh tree.
pub fn synthesize<P: StepPolicy + ?Sized>(
    problem: &Problem,
    policy: &P,
    cfg: &MctsConfig,
    rng: &mut Rng,
) -> Result<(SearchTree, Vec<ProcessSample>), MctsError> {
    cfg.validate()?;
    let mut tree = SearchTree::new(problem.id.clone());
    for _ in 0..cfg.rollouts {
        simulate(&mut tree, problem, policy, rng, cfg)?;
    }
    let samples = process_samples(&tree)?;
    Ok((tree, samples))
}

/// Root-to-terminal trajectories whose code compiled and passed every case.
pub fn extract_positive(trees: &[SearchTree]) -> Vec<Trajectory> {
    trees
        .iter()
        .flat_map(|t| {
            t.terminals()
                .filter(|&id| t.nodes[id].report.is_some_and(|r| r.all_passed()))
                .filter_map(|id| t.trajectory_to(id))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Nested JSON form of a tree, for replay and offline metric checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDump {
    pub id: usize,
    #[serde(rename = "N")]
    pub visits: u64,
    #[serde(rename = "W")]
    pub value_sum: f64,
    pub step: Option<ReasoningStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PassReport>,
    pub children: Vec<NodeDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDump {
    pub problem_id: String,
    pub root: NodeDump,
    pub log: Vec<SimulationRecord>,
}

impl SearchTree {
    pub fn dump(&self) -> TreeDump {
        fn node(t: &SearchTree, id: usize) -> NodeDump {
            let n = &t.nodes[id];
            NodeDump {
                id,
                visits: n.visits,
                value_sum: n.value_sum,
                step: n.step.clone(),
                report: n.report,
                children: n.children.iter().map(|&c| node(t, c)).collect(),
            }
        }
        TreeDump {
            problem_id: self.problem_id.clone(),
            root: node(self, ROOT),
            log: self.log.clone(),
        }
    }

    /// Rebuilds the arena; ids must be `0..n` with children after parents.
    pub fn from_dump(dump: &TreeDump) -> Option<SearchTree> {
        let mut flat: Vec<(usize, Option<usize>, usize, &NodeDump)> = Vec::new();
        fn walk<'a>(
            n: &'a NodeDump,
            parent: Option<usize>,
            depth: usize,
            out: &mut Vec<(usize, Option<usize>, usize, &'a NodeDump)>,
        ) {
            out.push((n.id, parent, depth, n));
            for c in &n.children {
                walk(c, Some(n.id), depth + 1, out);
            }
        }
        walk(&dump.root, None, 0, &mut flat);
        flat.sort_by_key(|e| e.0);
        if flat.iter().enumerate().any(|(i, e)| e.0 != i) {
            return None;
        }
        let nodes = flat
            .iter()
            .map(|&(_, parent, depth, n)| SearchNode {
                step: n.step.clone(),
                parent,
                children: n.children.iter().map(|c| c.id).collect(),
                visits: n.visits,
                value_sum: n.value_sum,
                report: n.report,
                depth,
            })
            .collect();
        Some(SearchTree {
            problem_id: dump.problem_id.clone(),
            nodes,
            log: dump.log.clone(),
            cache: Vec::new(),
        })
    }
}

/// Whether the step at `id` emits code.
pub fn is_emit(tree: &SearchTree, id: usize) -> bool {
    tree.nodes[id]
        .step
        .as_ref()
        .is_some_and(|s| s.kind() == ActionKind::EmitCode)
}
