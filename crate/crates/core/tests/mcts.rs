use std::collections::HashMap;

use selfplay_core::features::FeatureHasher;
use selfplay_core::mcts::*;
use selfplay_core::minilang::{make_corpus, parse_str, run_tests, CorpusSpec, PassReport, Problem};
use selfplay_core::policy::{Grammar, PolicyModel};
use selfplay_core::rng::{seeded, stream};

fn report(compile: bool, passed: usize, total: usize) -> PassReport {
    PassReport {
        compile,
        num_passed: passed,
        num_total: total,
        pass_rate: passed as f64 / total as f64,
    }
}

fn problem(src: &str) -> Problem {
    let inputs: Vec<[i64; 3]> = (0..10).map(|k| [k - 5, 2 * k - 5, 5 - k]).collect();
    Problem::from_ground_truth("q", parse_str(src).unwrap(), &inputs[..4], &inputs[4..]).unwrap()
}

fn policy(depth: usize) -> PolicyModel {
    PolicyModel::zeros(Grammar::new(depth), FeatureHasher::default())
}

fn small_cfg(rollouts: usize) -> MctsConfig {
    MctsConfig {
        rollouts,
        ..MctsConfig::default()
    }
}

#[test]
fn terminal_reward_values() {
    for a in [0.0, 0.3, 0.5, 1.0] {
        assert_eq!(terminal_reward(&report(true, 4, 4), a), 1.0);
        assert_eq!(terminal_reward(&report(false, 0, 4), a), 0.0);
    }
    assert!((terminal_reward(&report(true, 1, 2), 0.4) - 0.7).abs() < 1e-15);
}

#[test]
fn uct_rules() {
    let c = std::f64::consts::SQRT_2;
    assert_eq!(uct_select(&[(1.0, 1), (0.0, 1)], 2, c), Some(0));
    assert_eq!(uct_select(&[(1.0, 1), (0.0, 0), (0.0, 0)], 1, c), Some(1));
    assert_eq!(uct_select(&[(0.5, 1), (0.5, 1)], 2, c), Some(0));
    assert_eq!(uct_select(&[], 0, c), None);
}

#[test]
fn backpropagation_accumulates() {
    let mut t = SearchTree::new("p");
    t.backpropagate(&[ROOT], 1.0);
    assert_eq!((t.root().visits, t.root().value_sum), (1, 1.0));
    t.backpropagate(&[ROOT], 0.0);
    assert_eq!((t.root().visits, t.root().value_sum), (2, 1.0));
    assert_eq!(t.normalized_value(ROOT), Ok(0.5));
    assert_eq!(
        SearchTree::new("p").normalized_value(ROOT),
        Err(MctsError::Unvisited(ROOT))
    );
}

#[test]
fn single_rollout_gives_one_path() {
    let p = problem("+ x0 1");
    let mut tree = SearchTree::new(&p.id);
    let (path, reward) =
        simulate(&mut tree, &p, &policy(1), &mut seeded(1), &small_cfg(1)).unwrap();
    assert_eq!(tree.terminals().count(), 1);
    assert_eq!(path.len(), tree.len());
    assert!((0.0..=1.0).contains(&reward));
    for &id in &path {
        assert_eq!(tree.nodes[id].visits, 1);
    }
}

#[test]
fn determinism_and_sample_count() {
    let p = problem("max x1 - x0 2");
    let a = synthesize(&p, &policy(2), &small_cfg(32), &mut seeded(3)).unwrap();
    let b = synthesize(&p, &policy(2), &small_cfg(32), &mut seeded(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.len(), a.0.len());
    assert_eq!(a.0.root().visits, 32);
}

#[test]
fn truncation_forces_emit() {
    let p = problem("* x0 x1");
    let cfg = MctsConfig {
        max_depth: 2,
        rollouts: 8,
        ..MctsConfig::default()
    };
    let (tree, _) = synthesize(&p, &policy(2), &cfg, &mut seeded(0)).unwrap();
    for id in tree.terminals() {
        assert_eq!(tree.nodes[id].depth, 2);
        assert!(tree
            .trajectory_to(id)
            .unwrap()
            .validate(&Grammar::new(2))
            .is_ok());
    }
}

#[test]
fn failing_and_passing_searches() {
    // Depth-3 truth that a depth-1 grammar can never express on these inputs.
    let hard = problem("* * x0 x1 * x2 x2");
    let cfg = MctsConfig {
        alpha_mix: 0.0,
        rollouts: 16,
        ..MctsConfig::default()
    };
    let (tree, samples) = synthesize(&hard, &policy(1), &cfg, &mut seeded(2)).unwrap();
    assert!(samples.iter().all(|s| s.v < 1.0));
    assert!(extract_positive(&[tree]).is_empty());

    // A policy that trusts the exact consistency feature finds the answer.
    let easy = problem("+ x0 x1");
    let mut informed = policy(1);
    let hasher = informed.params.hasher;
    informed.params.weights[hasher.index(&[b"joint", b"yes"]) as usize] = 8.0;
    informed.params.weights[hasher.index(&[b"reach", b"all"]) as usize] = 4.0;
    let (tree, samples) = synthesize(&easy, &informed, &small_cfg(64), &mut seeded(2)).unwrap();
    let positives = extract_positive(std::slice::from_ref(&tree));
    assert!(!positives.is_empty());
    assert!(samples.iter().any(|s| s.terminal && s.v == 1.0));
    for t in &positives {
        assert_eq!(
            run_tests(&t.final_code, &easy.eval_cases, 256).pass_rate,
            1.0
        );
    }
}

fn check_invariants(tree: &SearchTree, problem: &Problem, rollouts: usize) {
    assert_eq!(tree.root().visits, rollouts as u64);
    assert_eq!(tree.log.len(), rollouts);
    for (id, n) in tree.nodes.iter().enumerate() {
        let v = tree.normalized_value(id).unwrap();
        assert!((0.0..=1.0).contains(&v));
        if !n.is_terminal() {
            let sum: u64 = n.children.iter().map(|&c| tree.nodes[c].visits).sum();
            assert_eq!(n.visits, sum, "node {id}");
        }
        let steps: Vec<_> = n
            .children
            .iter()
            .map(|&c| tree.nodes[c].step.clone())
            .collect();
        for (i, s) in steps.iter().enumerate() {
            assert!(!steps[..i].contains(s));
        }
    }
    // Replay oracle: mean of the logged rewards of the simulations through each node.
    let mut acc: HashMap<usize, (f64, u64)> = HashMap::new();
    for rec in &tree.log {
        for &id in &rec.path {
            let e = acc.entry(id).or_default();
            e.0 += rec.reward;
            e.1 += 1;
        }
    }
    for (id, (sum, n)) in acc {
        assert!((tree.normalized_value(id).unwrap() - sum / n as f64).abs() <= 1e-12);
    }
    for t in extract_positive(std::slice::from_ref(tree)) {
        assert_eq!(
            run_tests(&t.final_code, &problem.eval_cases, 256).pass_rate,
            1.0
        );
    }
}

#[test]
fn invariants_across_seeds() {
    for seed in 0..12u64 {
        let depth = 1 + (seed as usize % 3);
        let spec = CorpusSpec {
            count: 1,
            max_depth: depth,
            ..CorpusSpec::default()
        };
        let p = &make_corpus(&spec, seed).unwrap()[0];
        let cfg = MctsConfig {
            expansion_width: 1 + (seed as usize % 4),
            ..small_cfg(64)
        };
        let (tree, samples) =
            synthesize(p, &policy(depth), &cfg, &mut stream(seed, "mcts", 0)).unwrap();
        check_invariants(&tree, p, 64);
        assert_eq!(samples.len(), tree.len());
    }
}

#[test]
fn dump_round_trip() {
    let p = problem("min x2 x0");
    let (tree, _) = synthesize(&p, &policy(2), &small_cfg(20), &mut seeded(8)).unwrap();
    let json = serde_json::to_string(&tree.dump()).unwrap();
    let back = SearchTree::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
    assert_eq!(back, tree);
    assert!(json.contains("\"N\":20"));
}
