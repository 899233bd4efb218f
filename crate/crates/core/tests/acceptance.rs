//! End-to-end acceptance checks. Runs without the libtest harness so that
//! one PASS/FAIL line per criterion is always printed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use serde_json::Value;

use selfplay_core::features::{
    points_loglik, DecisionPoint, FeatureHasher, FeatureVec, ModelParams,
};
use selfplay_core::mcts::{extract_positive, synthesize, MctsConfig, SearchTree, TreeDump};
use selfplay_core::minilang::{make_corpus, run_tests, CorpusSpec, Problem};
use selfplay_core::orchestrator::{aspr, build_corpus, io, run_selfplay, stage_tcg, RunConfig};
use selfplay_core::policy::{
    sample_trajectory, sft_loss, Grammar, PolicyModel, SftExample, Trajectory,
};
use selfplay_core::prm::{
    extract_pairwise, extract_pointwise, featurize_pairs, featurize_points, pairwise_loss,
    pairwise_loss_on, pointwise_loss, pointwise_loss_on, LabelMode, PrmModel,
};
use selfplay_core::rl::{
    aggregate, alpha_at, reinforce_surrogate, run_episode, score_points, RewardConfig,
};
use selfplay_core::rng::stream;
use selfplay_core::tcg::{
    build_preference_pair, dpo_loss, DpoConfig, OracleGenerator, PreferencePair,
};

const LN2: f64 = std::f64::consts::LN_2;
const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-5;
/// Denominator floor for the relative error, so coordinates whose gradient is
/// zero in both forms do not divide noise by noise.
const FD_FLOOR: f64 = 1e-4;
const SEEDS: u64 = 10;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus(seed: u64) -> Vec<Problem> {
    make_corpus(&CorpusSpec::default(), seed).unwrap()
}

// 1 ---------------------------------------------------------------------

fn loss_anchors() -> Outcome {
    let problems = corpus(0);
    let mut rng = stream(1, "anchors", 0);
    let pairs: Vec<PreferencePair> = problems
        .iter()
        .filter_map(|p| build_preference_pair(p, &mut rng).ok())
        .collect();
    let mut worst = 0.0f64;
    for k in 0..5 {
        let theta = ModelParams::random(
            FeatureHasher::default(),
            1.0,
            &mut stream(1, "anchor-theta", k),
        );
        let (l, _) =
            dpo_loss(&theta, &theta, &pairs, &DpoConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max((l - LN2).abs());
    }
    // Zero weights score every prefix 0, so winner and loser tie.
    let zero = ModelParams::zeros(FeatureHasher::default());
    let pairs: Vec<_> = (0..8u32)
        .map(|k| {
            (
                FeatureVec::from_entries(vec![(k, 1.0)]),
                FeatureVec::from_entries(vec![(k + 100, -2.0)]),
            )
        })
        .collect();
    let (l, _) = pairwise_loss_on(&zero, &pairs).unwrap();
    worst = worst.max((l - LN2).abs());
    // Label 0.5 against a score of exactly 0.5.
    let f = FeatureVec::from_entries(vec![(3, 1.0)]);
    let (l, _) =
        pointwise_loss_on(&ModelParams::zeros(FeatureHasher::default()), &[(f, 0.5)]).unwrap();
    worst = worst.max((l - LN2).abs());
    check(worst <= 1e-12, || format!("max |loss - ln 2| = {worst:e}"))?;
    Ok(format!("max |loss - ln 2| = {worst:.1e} (tol 1e-12)"))
}

// 2 ---------------------------------------------------------------------

/// Central differences on every coordinate; returns the worst relative error.
fn fd_check(
    params: &mut ModelParams,
    analytic: &[f64],
    mut loss: impl FnMut(&ModelParams) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..params.dim() {
        let w = params.weights[i];
        params.weights[i] = w + FD_STEP;
        let up = loss(params);
        params.weights[i] = w - FD_STEP;
        let down = loss(params);
        params.weights[i] = w;
        let num = (up - down) / (2.0 * FD_STEP);
        worst =
            worst.max((analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(FD_FLOOR));
    }
    worst
}

const FD_DIM: usize = 128;
const FD_BATCHES: u64 = 10;

fn small_trees(seed: u64, n: usize) -> Vec<SearchTree> {
    let problems = corpus(seed);
    let policy = PolicyModel::zeros(Grammar::new(2), FeatureHasher::default());
    let cfg = MctsConfig {
        rollouts: 24,
        ..MctsConfig::default()
    };
    problems[..n]
        .iter()
        .enumerate()
        .map(|(k, p)| {
            synthesize(p, &policy, &cfg, &mut stream(seed, "fd-tree", k as u64))
                .unwrap()
                .0
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let hasher = FeatureHasher::new(FD_DIM, 5);
    let grammar = Grammar::new(2);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for b in 0..FD_BATCHES {
        let problems = corpus(100 + b);
        let mut rng = stream(b, "gradient-suite", 0);

        // DPO over test-case triples.
        let batch: Vec<PreferencePair> = problems
            .iter()
            .filter_map(|p| build_preference_pair(p, &mut rng).ok())
            .take(8)
            .collect();
        let mut theta = ModelParams::random(hasher, 0.5, &mut rng);
        let reference = ModelParams::random(hasher, 0.5, &mut rng);
        let cfg = DpoConfig {
            beta: 0.5,
            ..DpoConfig::default()
        };
        let (_, g) = dpo_loss(&theta, &reference, &batch, &cfg).unwrap();
        note(
            "dpo",
            fd_check(&mut theta, &g, |t| {
                dpo_loss(t, &reference, &batch, &cfg).unwrap().0
            }),
        );

        // SFT on sampled trajectories.
        let mut policy = PolicyModel {
            grammar,
            params: ModelParams::random(hasher, 0.3, &mut rng),
        };
        let trajs: Vec<Trajectory> = problems[..6]
            .iter()
            .map(|p| {
                sample_trajectory(&policy, p, &mut rng, 16)
                    .unwrap()
                    .trajectory
            })
            .collect();
        let data: Vec<SftExample> = problems
            .iter()
            .zip(&trajs)
            .map(|(problem, trajectory)| SftExample {
                problem,
                trajectory,
            })
            .collect();
        let (_, g) = sft_loss(&policy, &data).unwrap();
        // Features do not depend on the weights, so they are computed once.
        let frozen: Vec<Vec<DecisionPoint>> = data
            .iter()
            .map(|ex| {
                policy
                    .decision_points(ex.problem, &ex.trajectory.steps)
                    .unwrap()
            })
            .collect();
        let n = frozen.len() as f64;
        note(
            "sft",
            fd_check(&mut policy.params, &g, |t| {
                -frozen.iter().map(|p| points_loglik(t, p)).sum::<f64>() / n
            }),
        );

        // Point-wise and pair-wise PRM losses on labels taken from search trees.
        let trees = small_trees(100 + b, 3);
        let points = extract_pointwise(&trees, LabelMode::Soft, 1);
        let pairs = extract_pairwise(&trees, 1, 0.05);
        let mut prm = PrmModel {
            grammar,
            params: ModelParams::random(hasher, 0.5, &mut rng),
        };
        let (_, g) = pointwise_loss(&prm, &problems, &points).unwrap();
        let fp = featurize_points(&prm, &problems, &points).unwrap();
        note(
            "pointwise",
            fd_check(&mut prm.params, &g, |t| {
                pointwise_loss_on(t, &fp).unwrap().0
            }),
        );
        let (_, g) = pairwise_loss(&prm, &problems, &pairs).unwrap();
        let fq = featurize_pairs(&prm, &problems, &pairs).unwrap();
        note(
            "pairwise",
            fd_check(&mut prm.params, &g, |t| pairwise_loss_on(t, &fq).unwrap().0),
        );

        // REINFORCE surrogate on a frozen batch of episodes.
        let reward = RewardConfig::default();
        let episodes: Vec<_> = (0..8)
            .map(|k| {
                run_episode(
                    &policy,
                    &prm,
                    &OracleGenerator,
                    &problems[k % 4],
                    &mut rng,
                    k as u64,
                    &reward,
                    16,
                )
                .unwrap()
            })
            .collect();
        let scored = score_points(&policy, &problems, &episodes).unwrap();
        let (_, g) = reinforce_surrogate(&policy.params, &scored).unwrap();
        note(
            "reinforce",
            fd_check(&mut policy.params, &g, |t| {
                reinforce_surrogate(t, &scored).unwrap().0
            }),
        );
    }
    let summary = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst.values().all(|&w| w <= FD_TOL), || summary.clone())?;
    Ok(format!(
        "{FD_BATCHES} batches x {FD_DIM} coordinates; worst rel. err: {summary} (tol 1e-5)"
    ))
}

// 3 ---------------------------------------------------------------------

fn mcts_invariants() -> Outcome {
    let mut nodes = 0;
    let mut positives = 0;
    for seed in 0..100u64 {
        let depth = 1 + (seed as usize % 3);
        let width = 1 + (seed as usize / 3 % 4);
        let spec = CorpusSpec {
            count: 1,
            max_depth: depth,
            ..CorpusSpec::default()
        };
        let p = &make_corpus(&spec, seed).map_err(|e| e.to_string())?[0];
        let policy = PolicyModel::random(
            Grammar::new(depth),
            FeatureHasher::default(),
            0.1,
            &mut stream(seed, "mcts-policy", 0),
        );
        let cfg = MctsConfig {
            rollouts: 64,
            expansion_width: width,
            ..MctsConfig::default()
        };
        let (tree, _) = synthesize(p, &policy, &cfg, &mut stream(seed, "mcts-acceptance", 0))
            .map_err(|e| e.to_string())?;
        check(tree.root().visits == 64, || {
            format!("seed {seed}: root N = {}", tree.root().visits)
        })?;
        let mut replay: HashMap<usize, (f64, u64)> = HashMap::new();
        for rec in &tree.log {
            for &id in &rec.path {
                let e = replay.entry(id).or_default();
                e.0 += rec.reward;
                e.1 += 1;
            }
        }
        for id in 0..tree.len() {
            let v = tree.normalized_value(id).map_err(|e| e.to_string())?;
            check((0.0..=1.0).contains(&v), || {
                format!("seed {seed}: node {id} value {v}")
            })?;
            let (sum, n) = replay[&id];
            check((v - sum / n as f64).abs() <= 1e-12, || {
                format!("seed {seed}: node {id} replay mismatch")
            })?;
        }
        for t in extract_positive(std::slice::from_ref(&tree)) {
            let rate = run_tests(&t.final_code, &p.eval_cases, 256).pass_rate;
            check(rate == 1.0, || {
                format!("seed {seed}: D+ trajectory re-executes to {rate}")
            })?;
            positives += 1;
        }
        nodes += tree.len();
    }
    Ok(format!(
        "100 syntheses, {nodes} nodes, {positives} D+ trajectories re-verified"
    ))
}

// 4 ---------------------------------------------------------------------

fn aggregation() -> Outcome {
    let mut rng = stream(4, "aggregate", 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..20);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let big_r = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let gamma = rng.random_range(0.0..=1.0);
        let alpha = rng.random_range(0.0..=1.0);
        let mut cfg = RewardConfig {
            gamma,
            ..RewardConfig::default()
        };
        cfg.schedule.alpha_start = alpha;
        cfg.schedule.alpha_end = alpha;
        let t = rng.random_range(0..500);
        let a = alpha_at(&cfg.schedule, t);
        // Direct evaluation: alpha R + (1 - alpha) / m * sum_j gamma^j r_j, j = 1..m.
        let direct = a * big_r
            + (1.0 - a) / m as f64
                * r.iter()
                    .enumerate()
                    .map(|(j, x)| gamma.powi(j as i32 + 1) * x)
                    .sum::<f64>();
        let got = aggregate(big_r, &r, t, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - direct).abs());
        // Linearity in the step rewards and in R.
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let sum: Vec<f64> = r.iter().zip(&s).map(|(x, y)| x + y).collect();
        let lin = aggregate(big_r, &sum, t, &cfg).unwrap()
            - aggregate(big_r, &r, t, &cfg).unwrap()
            - aggregate(0.0, &s, t, &cfg).unwrap();
        worst = worst.max(lin.abs());
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "1000 tuples, max deviation {worst:.1e} (tol 1e-12)"
    ))
}

// 5 ---------------------------------------------------------------------

fn tcg_direction() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let mut cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let split = build_corpus(&cfg).map_err(|e| e.to_string())?;
        // 500 sampled cases over the held-out problems.
        cfg.tcg.eval_per_problem = 500 / split.heldout.len();
        let t = stage_tcg(&cfg, &split).map_err(|e| e.to_string())?;
        if t.pass_rate >= t.pass_rate_uniform + 0.05 {
            wins += 1;
        }
        lines.push(format!("{:.3}->{:.3}", t.pass_rate_uniform, t.pass_rate));
    }
    let detail = format!("{wins}/{SEEDS} seeds gain >= 5pp [{}]", lines.join(" "));
    check(wins >= 9, || detail.clone())?;
    Ok(detail)
}

// 6 and 7 ---------------------------------------------------------------

fn selfplay_runs(root: &Path) -> Outcome {
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 0..SEEDS {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let (_, r) =
            run_selfplay(&cfg, &root.join(format!("seed{seed}"))).map_err(|e| e.to_string())?;
        let ok = r.final_pass_at_1 >= r.baseline_pass_at_1 + 0.15 - 1e-9
            && r.final_pass_at_1 >= r.sft_pass_at_1;
        good += usize::from(ok);
        lines.push(format!(
            "{:.1}/{:.1}/{:.1}",
            r.baseline_pass_at_1, r.sft_pass_at_1, r.final_pass_at_1
        ));
    }
    let detail = format!(
        "{good}/{SEEDS} seeds meet both margins; random/sft/final [{}]",
        lines.join(" ")
    );
    check(good >= 8, || detail.clone())?;
    Ok(detail)
}

fn artifact_files(dir: &Path) -> BTreeSet<std::path::PathBuf> {
    let mut out = BTreeSet::new();
    for entry in walk(dir) {
        if matches!(
            entry.extension().and_then(|e| e.to_str()),
            Some("jsonl" | "csv" | "json")
        ) {
            out.insert(entry.strip_prefix(dir).unwrap().to_path_buf());
        }
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism(root: &Path) -> Outcome {
    let first = root.join("seed0");
    let second = root.join("seed0-again");
    run_selfplay(
        &RunConfig {
            seed: 0,
            ..RunConfig::default()
        },
        &second,
    )
    .map_err(|e| e.to_string())?;
    let (a, b) = (artifact_files(&first), artifact_files(&second));
    check(a == b, || "artifact sets differ".into())?;
    for f in &a {
        let same = std::fs::read(first.join(f)).unwrap() == std::fs::read(second.join(f)).unwrap();
        check(same, || format!("{} differs", f.display()))?;
    }
    Ok(format!("{} artifacts byte-identical", a.len()))
}

// 8 ---------------------------------------------------------------------

/// Recount from raw JSON, without the library's tree types.
fn recount(trees: &[Value]) -> Option<f64> {
    struct Node {
        parent: Option<u64>,
        children: Vec<u64>,
        emit: bool,
        pass: bool,
    }
    fn flatten(v: &Value, parent: Option<u64>, out: &mut BTreeMap<u64, Node>) {
        let id = v["id"].as_u64().unwrap();
        let emit = v["step"]["action"] == "emit_code";
        let pass = v.get("report").is_some_and(|r| {
            r["compile"] == true
                && r["num_passed"].as_u64() == r["num_total"].as_u64()
                && r["num_total"].as_u64() > Some(0)
        });
        let kids = v["children"].as_array().unwrap();
        out.insert(
            id,
            Node {
                parent,
                children: kids.iter().map(|c| c["id"].as_u64().unwrap()).collect(),
                emit,
                pass,
            },
        );
        for c in kids {
            flatten(c, Some(id), out);
        }
    }
    let mut per_tree = Vec::new();
    for t in trees {
        let mut nodes = BTreeMap::new();
        flatten(&t["root"], None, &mut nodes);
        let mut decisions = BTreeSet::new();
        for n in nodes.values().filter(|n| n.emit && n.pass) {
            let parent = n.parent.unwrap();
            let p = &nodes[&parent];
            decisions.insert(match p.parent {
                Some(g) if p.children.len() == 1 => g,
                _ => parent,
            });
        }
        if decisions.is_empty() {
            continue;
        }
        let mut ratios = Vec::new();
        for g in decisions {
            let mut outcomes = Vec::new();
            for c in &nodes[&g].children {
                let c = &nodes[c];
                if c.emit {
                    outcomes.push(c.pass);
                } else if c.children.len() == 1 && nodes[&c.children[0]].emit {
                    outcomes.push(nodes[&c.children[0]].pass);
                }
            }
            ratios.push(outcomes.iter().filter(|&&x| x).count() as f64 / outcomes.len() as f64);
        }
        per_tree.push(ratios.iter().sum::<f64>() / ratios.len() as f64);
    }
    (!per_tree.is_empty()).then(|| per_tree.iter().sum::<f64>() / per_tree.len() as f64)
}

fn aspr_oracle(root: &Path) -> Outcome {
    let text = std::fs::read_to_string(root.join("seed0").join("trees.jsonl"))
        .map_err(|e| e.to_string())?;
    let raw: Vec<Value> = text
        .lines()
        .take(20)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    check(raw.len() == 20, || {
        format!("only {} trees dumped", raw.len())
    })?;
    let dumps: Vec<TreeDump> =
        io::read_jsonl(&root.join("seed0").join("trees.jsonl")).map_err(|e| e.to_string())?;
    let trees: Vec<SearchTree> = dumps[..20]
        .iter()
        .map(|d| SearchTree::from_dump(d).unwrap())
        .collect();
    let lib = aspr(&trees).map_err(|e| e.to_string())?;
    let oracle = recount(&raw).ok_or("recount found no qualifying trees")?;
    check(lib == oracle, || {
        format!("library {lib} vs recount {oracle}")
    })?;
    Ok(format!("aspr = {lib} on 20 trees, recount identical"))
}

// -----------------------------------------------------------------------

fn run(n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default())
    });
    let took = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over the {limit:?} budget")),
        Err(d) => (false, d),
    };
    println!(
        "criterion {n} [{name}]: {} ({:.1}s) {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let results = [
        run(1, "loss anchors", Duration::from_secs(1), loss_anchors),
        run(2, "gradient suite", Duration::from_secs(60), gradient_suite),
        run(
            3,
            "mcts invariants",
            Duration::from_secs(60),
            mcts_invariants,
        ),
        run(4, "aggregation", Duration::from_secs(5), aggregation),
        run(5, "tcg direction", Duration::from_secs(120), tcg_direction),
        run(6, "self-play improvement", Duration::from_secs(600), || {
            selfplay_runs(root)
        }),
        run(7, "determinism", Duration::from_secs(600), || {
            determinism(root)
        }),
        run(8, "aspr oracle", Duration::from_secs(60), || {
            aspr_oracle(root)
        }),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
