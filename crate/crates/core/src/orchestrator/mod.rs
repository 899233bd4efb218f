//! The full training loop, its configuration, metrics and artifacts.
//!
//! Order of work: train the test-case generator, search the train problems
//! with the random policy, fine-tune on the passing paths, then repeat
//! {fit the reward model, improve the policy with RL, search a fresh batch of
//! problems and merge the new data}.

mod config;
pub mod io;
mod metrics;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{PolicyConfig, PrmConfig, RlConfig, RlMethod, RunConfig, TcgConfig};
pub use metrics::{
    aspr, converged, emit_report, final_decision_node, pass_at_1, read_report, tree_aspr,
    IterationMetrics, MetricsReport,
};

use crate::features::FeatureHasher;
use crate::mcts::{
    extract_positive, process_samples, synthesize, MctsError, ProcessSample, SearchTree,
};
use crate::minilang::{make_corpus, make_problems, CorpusError, CorpusSpec, Problem, Token};
use crate::policy::{train_sft, Grammar, PolicyError, PolicyModel, SftExample, Trajectory};
use crate::prm::{
    extract_pairwise, extract_pointwise, train_prm, LabelMode, Objective, PairwiseSample,
    PointwiseSample, PrmData, PrmError, PrmModel,
};
use crate::rl::{
    iterative_dpo_update, reinforce_step, run_episode, score_points, EpisodeRecord, RlError,
};
use crate::rng::stream;
use crate::tcg::{
    build_preference_pair, tcg_pass_rate, train_tcg, PreferencePair, TcgError, TcgModel, TcgParams,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no tree contains a fully passing terminal")]
    NoQualifyingTrees,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tcg(#[from] TcgError),
    #[error(transparent)]
    Mcts(#[from] MctsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prm(#[from] PrmError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl OrchestratorError {
    pub fn is_config(&self) -> bool {
        matches!(self, OrchestratorError::Config(_))
    }
}

/// Train and held-out problems.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Problem>,
    pub heldout: Vec<Problem>,
}

/// The corpus with its last `eval_fraction` held out.
pub fn build_corpus(cfg: &RunConfig) -> Result<Split, OrchestratorError> {
    let mut all = make_corpus(&cfg.corpus, cfg.seed)?;
    let heldout = all.split_off(all.len() - cfg.heldout_count());
    Ok(Split {
        train: all,
        heldout,
    })
}

pub fn grammar(cfg: &RunConfig) -> Grammar {
    Grammar::new(cfg.policy.grammar_depth)
}

pub fn hasher(cfg: &RunConfig) -> FeatureHasher {
    FeatureHasher::new(cfg.policy.feature_dim, 0)
}

pub fn init_policy(cfg: &RunConfig) -> PolicyModel {
    let mut rng = stream(cfg.seed, "policy-init", 0);
    PolicyModel::random(grammar(cfg), hasher(cfg), cfg.policy.init_scale, &mut rng)
}

pub struct TcgOutcome {
    pub params: TcgParams,
    pub pairs: Vec<PreferencePair>,
    pub trace: Vec<f64>,
    pub pass_rate_uniform: f64,
    pub pass_rate: f64,
}

/// Step one: preference pairs from the train split, DPO from the uniform
/// generator, and pass rates on the held-out split before and after.
pub fn stage_tcg(cfg: &RunConfig, split: &Split) -> Result<TcgOutcome, OrchestratorError> {
    let mut rng = stream(cfg.seed, "tcg-pairs", 0);
    let mut pairs = Vec::new();
    for p in &split.train {
        for _ in 0..cfg.tcg.pairs_per_problem {
            match build_preference_pair(p, &mut rng) {
                Ok(pair) => pairs.push(pair),
                Err(TcgError::DegeneratePair) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    let uniform = TcgParams::zeros(hasher(cfg));
    let (params, trace) = if pairs.is_empty() {
        (uniform.clone(), Vec::new())
    } else {
        train_tcg(&uniform, &uniform, &pairs, &cfg.tcg.dpo())?
    };
    let per = cfg.tcg.eval_per_problem;
    let pass_rate_uniform = tcg_pass_rate(
        &TcgModel { params: &uniform },
        &split.heldout,
        per,
        &mut stream(cfg.seed, "tcg-eval", 0),
    );
    let pass_rate = tcg_pass_rate(
        &TcgModel { params: &params },
        &split.heldout,
        per,
        &mut stream(cfg.seed, "tcg-eval", 0),
    );
    Ok(TcgOutcome {
        params,
        pairs,
        trace,
        pass_rate_uniform,
        pass_rate,
    })
}

/// Searches every problem; tree `k` uses the RNG stream `(label, k)`.
pub fn stage_synthesize(
    cfg: &RunConfig,
    policy: &PolicyModel,
    problems: &[Problem],
    label: &str,
) -> Result<Vec<SearchTree>, OrchestratorError> {
    problems
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = stream(cfg.seed, label, k as u64);
            Ok(synthesize(p, policy, &cfg.mcts, &mut rng)?.0)
        })
        .collect()
}

/// Fine-tunes on the passing trajectories; no positives means no change.
pub fn stage_sft(
    cfg: &RunConfig,
    policy: &PolicyModel,
    problems: &[Problem],
    positives: &[Trajectory],
) -> Result<(PolicyModel, Vec<f64>), OrchestratorError> {
    let by_id: BTreeMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let data: Vec<SftExample<'_>> = positives
        .iter()
        .filter_map(|t| {
            by_id.get(t.problem_id.as_str()).map(|p| SftExample {
                problem: p,
                trajectory: t,
            })
        })
        .collect();
    let mut next = policy.clone();
    if data.is_empty() {
        return Ok((next, Vec::new()));
    }
    let trace = train_sft(&mut next, &data, cfg.policy.sft_lr, cfg.policy.sft_steps)?;
    Ok((next, trace))
}

/// `D_process` keyed by problem and serialized prefix; later inserts win.
#[derive(Debug, Clone, Default)]
pub struct ProcessStore {
    entries: BTreeMap<(String, String), (ProcessSample, bool)>,
}

impl ProcessStore {
    /// Adds every node of `tree`, with its hard label.
    pub fn union_tree(&mut self, tree: &SearchTree) -> Result<(), OrchestratorError> {
        let samples = process_samples(tree)?;
        let hard = extract_pointwise(std::slice::from_ref(tree), LabelMode::Hard, 0);
        for (s, h) in samples.into_iter().zip(hard) {
            let key = (s.problem_id.clone(), serde_json::to_string(&s.prefix)?);
            self.entries.insert(key, (s, h.v == 1.0));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &ProcessSample> {
        self.entries.values().map(|(s, _)| s)
    }

    pub fn pointwise(&self, mode: LabelMode, min_visits: u64) -> Vec<PointwiseSample> {
        self.entries
            .values()
            .filter(|(s, _)| s.visits >= min_visits.max(1))
            .map(|(s, hard)| PointwiseSample {
                problem_id: s.problem_id.clone(),
                prefix: s.prefix.clone(),
                v: match mode {
                    LabelMode::Soft => s.v,
                    LabelMode::Hard => f64::from(u8::from(*hard)),
                },
            })
            .collect()
    }
}

pub struct PrmOutcome {
    pub model: PrmModel,
    pub points: Vec<PointwiseSample>,
    pub pairs: Vec<PairwiseSample>,
    pub trace: Vec<f64>,
}

/// Fits a fresh reward model on the accumulated data.
pub fn stage_prm(
    cfg: &RunConfig,
    problems: &[Problem],
    store: &ProcessStore,
    trees: &[SearchTree],
) -> Result<PrmOutcome, OrchestratorError> {
    let points = store.pointwise(cfg.prm.labels, cfg.prm.min_visits);
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for p in extract_pairwise(trees, cfg.prm.min_visits, cfg.prm.margin) {
        if seen.insert(serde_json::to_string(&p)?) {
            pairs.push(p);
        }
    }
    let mut model = PrmModel::zeros(grammar(cfg), hasher(cfg));
    let data = match cfg.prm.objective {
        Objective::Point => PrmData::Point(&points),
        Objective::Pair => PrmData::Pair(&pairs),
    };
    let trace = match train_prm(&mut model, problems, data, cfg.prm.lr, cfg.prm.steps) {
        Ok(t) => t,
        Err(PrmError::EmptyDataset) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok(PrmOutcome {
        model,
        points,
        pairs,
        trace,
    })
}

pub struct RlOutcome {
    pub policy: PolicyModel,
    pub episodes: Vec<EpisodeRecord>,
    /// Schedule counter after the last update.
    pub t: u64,
}

/// `updates_per_iteration` rounds of fresh episodes and one policy update each.
pub fn stage_rl(
    cfg: &RunConfig,
    policy: &PolicyModel,
    prm: &PrmModel,
    tcg: &TcgParams,
    problems: &[Problem],
    iteration: usize,
    mut t: u64,
) -> Result<RlOutcome, OrchestratorError> {
    let generator = TcgModel { params: tcg };
    let mut current = policy.clone();
    let mut all = Vec::new();
    for update in 0..cfg.rl.updates_per_iteration {
        let mut episodes = Vec::new();
        for (k, p) in problems.iter().enumerate() {
            for e in 0..cfg.rl.episodes_per_problem {
                let index = (((iteration as u64) << 40) | ((update as u64) << 24))
                    + (k * cfg.rl.episodes_per_problem + e) as u64;
                let mut rng = stream(cfg.seed, "episode", index);
                episodes.push(run_episode(
                    &current,
                    prm,
                    &generator,
                    p,
                    &mut rng,
                    t,
                    &cfg.rl.reward,
                    cfg.policy.max_steps,
                )?);
            }
        }
        current = match cfg.rl.method {
            RlMethod::Reinforce => {
                let batch = score_points(&current, problems, &episodes)?;
                reinforce_step(&current, &batch, cfg.rl.lr)?.0
            }
            RlMethod::IterativeDpo => {
                let reference = current.params.clone();
                match iterative_dpo_update(
                    &current,
                    &reference,
                    problems,
                    &episodes,
                    cfg.rl.beta,
                    cfg.rl.lr,
                    cfg.rl.dpo_steps,
                ) {
                    Ok((next, _)) => next,
                    Err(RlError::NoPairs) => current,
                    Err(e) => return Err(e.into()),
                }
            }
        };
        t += 1;
        all.extend(episodes);
    }
    Ok(RlOutcome {
        policy: current,
        episodes: all,
        t,
    })
}

/// Everything the loop carries between iterations.
pub struct RunState {
    pub iteration: usize,
    pub split: Split,
    pub policy: PolicyModel,
    pub prm: Option<PrmModel>,
    pub tcg: TcgParams,
    pub store: ProcessStore,
    pub trees: Vec<SearchTree>,
    /// Train problems plus every fresh batch, in creation order.
    pub problems: Vec<Problem>,
    pub positives: Vec<Trajectory>,
    pub episodes: Vec<EpisodeRecord>,
    pub pairs: Vec<PreferencePair>,
    pub prm_points: Vec<PointwiseSample>,
    pub prm_pairs: Vec<PairwiseSample>,
}

fn checkpoint(out: &Path, name: &str, iteration: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("{name}_iter{iteration}.json"))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs the whole loop and writes every artifact under `out`.
pub fn run_selfplay(
    cfg: &RunConfig,
    out: &Path,
) -> Result<(RunState, MetricsReport), OrchestratorError> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let split = build_corpus(cfg)?;
    io::write_jsonl(
        out.join("corpus.jsonl").as_path(),
        split.train.iter().chain(&split.heldout),
    )?;
    let max_steps = cfg.policy.max_steps;

    // Test-case generator.
    let tcg = stage_tcg(cfg, &split)?;
    io::write_jsonl(&out.join("d_pref.jsonl"), &tcg.pairs)?;
    io::write_json(&checkpoint(out, "tcg", 0), &tcg.params)?;

    // Search with the random policy, then SFT on what passed.
    let random = init_policy(cfg);
    let baseline = pass_at_1(&random, &split.heldout, max_steps);
    let trees = stage_synthesize(cfg, &random, &split.train, "synthesize-0")?;
    let positives = extract_positive(&trees);
    let mut store = ProcessStore::default();
    for t in &trees {
        store.union_tree(t)?;
    }
    let (policy, _) = stage_sft(cfg, &random, &split.train, &positives)?;
    io::write_jsonl(&out.join("d_positive.jsonl"), &positives)?;
    io::write_json(&checkpoint(out, "policy", 0), &policy)?;

    let sft_pass = pass_at_1(&policy, &split.heldout, max_steps);
    let mut history = vec![IterationMetrics {
        iteration: 0,
        pass_at_1: sft_pass,
        aspr: aspr(&trees).ok(),
        tcg_pass_rate: tcg.pass_rate,
        mean_phi: None,
        d_process_size: store.len(),
    }];

    let mut state = RunState {
        iteration: 0,
        problems: split.train.clone(),
        split,
        policy,
        prm: None,
        tcg: tcg.params,
        store,
        trees,
        positives,
        episodes: Vec::new(),
        pairs: tcg.pairs,
        prm_points: Vec::new(),
        prm_pairs: Vec::new(),
    };
    let mut seen_truths: HashSet<Vec<Token>> = state
        .split
        .train
        .iter()
        .chain(&state.split.heldout)
        .map(|p| p.ground_truth.tokens().to_vec())
        .collect();
    let mut t = 0u64;
    let mut is_converged = cfg.iterations == 0;

    while !is_converged {
        state.iteration += 1;
        let it = state.iteration;

        let prm = stage_prm(cfg, &state.problems, &state.store, &state.trees)?;
        io::write_json(&checkpoint(out, "prm", it), &prm.model)?;

        let rl = stage_rl(
            cfg,
            &state.policy,
            &prm.model,
            &state.tcg,
            &state.problems,
            it,
            t,
        )?;
        t = rl.t;
        state.policy = rl.policy;
        io::write_json(&checkpoint(out, "policy", it), &state.policy)?;
        let mean_phi = mean(rl.episodes.iter().map(|e| e.aggregated));
        state.episodes.extend(rl.episodes);

        // A fresh batch, searched with the updated policy and merged in.
        let spec = CorpusSpec {
            count: cfg.fresh_problems,
            ..cfg.corpus.clone()
        };
        let fresh = if cfg.fresh_problems == 0 {
            Vec::new()
        } else {
            make_problems(
                &spec,
                cfg.seed ^ (it as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                &format!("g{it}-"),
                &seen_truths,
            )?
        };
        seen_truths.extend(fresh.iter().map(|p| p.ground_truth.tokens().to_vec()));
        let new_trees = stage_synthesize(cfg, &state.policy, &fresh, &format!("synthesize-{it}"))?;
        let before = state.store.len();
        for tr in &new_trees {
            state.store.union_tree(tr)?;
        }
        debug_assert!(state.store.len() >= before);
        state.problems.extend(fresh);

        let pass = pass_at_1(&state.policy, &state.split.heldout, max_steps);
        history.push(IterationMetrics {
            iteration: it,
            pass_at_1: pass,
            aspr: aspr(&new_trees).ok(),
            tcg_pass_rate: tcg.pass_rate,
            mean_phi,
            d_process_size: state.store.len(),
        });
        state.trees.extend(new_trees);
        state.prm = Some(prm.model);
        state.prm_points = prm.points;
        state.prm_pairs = prm.pairs;
        let series: Vec<f64> = history.iter().map(|m| m.pass_at_1).collect();
        is_converged = converged(&series, it, cfg.iterations);
    }

    io::write_jsonl(
        &out.join("corpus_fresh.jsonl"),
        &state.problems[state.split.train.len()..],
    )?;
    io::write_jsonl(&out.join("d_process.jsonl"), state.store.samples())?;
    io::write_jsonl(&out.join("prm_point.jsonl"), &state.prm_points)?;
    io::write_jsonl(&out.join("prm_pair.jsonl"), &state.prm_pairs)?;
    io::write_jsonl(&out.join("episodes.jsonl"), &state.episodes)?;
    let dumps: Vec<_> = state.trees.iter().map(SearchTree::dump).collect();
    io::write_jsonl(&out.join("trees.jsonl"), &dumps)?;

    let report = MetricsReport {
        seed: cfg.seed,
        heldout: state.split.heldout.iter().map(|p| p.id.clone()).collect(),
        baseline_pass_at_1: baseline,
        sft_pass_at_1: sft_pass,
        final_pass_at_1: history.last().map_or(sft_pass, |m| m.pass_at_1),
        tcg_pass_rate_uniform: tcg.pass_rate_uniform,
        tcg_pass_rate: tcg.pass_rate,
        positives: state.positives.len(),
        converged: is_converged,
        iterations: history,
    };
    emit_report(&report, out)?;
    Ok((state, report))
}
