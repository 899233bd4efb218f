//! Command-line driver. Exit codes: 0 success, 2 bad config or arguments,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selfplay_core::mcts::{extract_positive, SearchTree, TreeDump};
use selfplay_core::minilang::Problem;
use selfplay_core::orchestrator::{
    build_corpus, init_policy, io, pass_at_1, read_report, run_selfplay, stage_prm, stage_rl,
    stage_sft, stage_synthesize, stage_tcg, OrchestratorError, ProcessStore, RunConfig,
};
use selfplay_core::policy::{PolicyModel, Trajectory};
use selfplay_core::prm::PrmModel;
use selfplay_core::tcg::TcgParams;

#[derive(Parser)]
#[command(
    name = "selfplay",
    version,
    about = "Self-play training of a step-level coder"
)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the problem corpus.
    GenCorpus,
    /// Train the test-case generator with DPO.
    TrainTcg,
    /// Search the train problems and write trees and process data.
    Synthesize {
        /// Policy checkpoint; the random initial policy if absent.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Fine-tune the policy on the passing trajectories from `synthesize`.
    Sft,
    /// Fit the process reward model on the saved trees.
    TrainPrm,
    /// One round of RL updates.
    Rl {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        prm: Option<PathBuf>,
        #[arg(long)]
        tcg: Option<PathBuf>,
    },
    /// The full loop.
    Selfplay,
    /// Held-out Pass@1 of a policy checkpoint.
    Eval {
        #[arg(long)]
        policy: PathBuf,
    },
    /// Print the saved report.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig, OrchestratorError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ckpt(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}_iter0.json"))
}

fn load_trees(path: &Path) -> Result<Vec<SearchTree>, OrchestratorError> {
    io::read_jsonl::<TreeDump>(path)?
        .iter()
        .map(|d| {
            SearchTree::from_dump(d).ok_or_else(|| {
                OrchestratorError::Config(format!("malformed tree dump for {}", d.problem_id))
            })
        })
        .collect()
}

fn run(cli: &Cli) -> Result<(), OrchestratorError> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    let split = build_corpus(&cfg)?;
    let train: &[Problem] = &split.train;
    match &cli.command {
        Command::GenCorpus => {
            io::write_jsonl(
                &out.join("corpus.jsonl"),
                split.train.iter().chain(&split.heldout),
            )?;
            println!(
                "{} train, {} held out",
                split.train.len(),
                split.heldout.len()
            );
        }
        Command::TrainTcg => {
            let t = stage_tcg(&cfg, &split)?;
            io::write_jsonl(&out.join("d_pref.jsonl"), &t.pairs)?;
            io::write_json(&ckpt(out, "tcg"), &t.params)?;
            println!(
                "pairs {}  pass rate {:.3} -> {:.3}",
                t.pairs.len(),
                t.pass_rate_uniform,
                t.pass_rate
            );
        }
        Command::Synthesize { policy } => {
            let model = match policy {
                Some(p) => io::read_json::<PolicyModel>(p)?,
                None => init_policy(&cfg),
            };
            let trees = stage_synthesize(&cfg, &model, train, "synthesize-0")?;
            let mut store = ProcessStore::default();
            for t in &trees {
                store.union_tree(t)?;
            }
            let positives = extract_positive(&trees);
            io::write_jsonl(
                &out.join("trees.jsonl"),
                &trees.iter().map(SearchTree::dump).collect::<Vec<_>>(),
            )?;
            io::write_jsonl(&out.join("d_process.jsonl"), store.samples())?;
            io::write_jsonl(&out.join("d_positive.jsonl"), &positives)?;
            println!(
                "trees {}  process samples {}  positives {}",
                trees.len(),
                store.len(),
                positives.len()
            );
        }
        Command::Sft => {
            let positives: Vec<Trajectory> = io::read_jsonl(&out.join("d_positive.jsonl"))?;
            let (model, trace) = stage_sft(&cfg, &init_policy(&cfg), train, &positives)?;
            io::write_json(&ckpt(out, "policy"), &model)?;
            if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
                println!("sft loss {a:.4} -> {b:.4}");
            }
            println!(
                "held-out pass@1 {:.3}",
                pass_at_1(&model, &split.heldout, cfg.policy.max_steps)
            );
        }
        Command::TrainPrm => {
            let trees = load_trees(&out.join("trees.jsonl"))?;
            let mut store = ProcessStore::default();
            for t in &trees {
                store.union_tree(t)?;
            }
            let prm = stage_prm(&cfg, train, &store, &trees)?;
            io::write_json(&ckpt(out, "prm"), &prm.model)?;
            io::write_jsonl(&out.join("prm_point.jsonl"), &prm.points)?;
            io::write_jsonl(&out.join("prm_pair.jsonl"), &prm.pairs)?;
            println!(
                "point samples {}  pair samples {}",
                prm.points.len(),
                prm.pairs.len()
            );
        }
        Command::Rl { policy, prm, tcg } => {
            let policy: PolicyModel =
                io::read_json(policy.as_deref().unwrap_or(&ckpt(out, "policy")))?;
            let prm: PrmModel = io::read_json(prm.as_deref().unwrap_or(&ckpt(out, "prm")))?;
            let tcg: TcgParams = io::read_json(tcg.as_deref().unwrap_or(&ckpt(out, "tcg")))?;
            let r = stage_rl(&cfg, &policy, &prm, &tcg, train, 1, 0)?;
            io::write_json(
                &out.join("checkpoints").join("policy_iter1.json"),
                &r.policy,
            )?;
            io::write_jsonl(&out.join("episodes.jsonl"), &r.episodes)?;
            println!(
                "held-out pass@1 {:.3}",
                pass_at_1(&r.policy, &split.heldout, cfg.policy.max_steps)
            );
        }
        Command::Selfplay => {
            let (_, report) = run_selfplay(&cfg, out)?;
            for m in &report.iterations {
                println!(
                    "iter {}  pass@1 {:.3}  aspr {}  d_process {}",
                    m.iteration,
                    m.pass_at_1,
                    m.aspr.map_or("-".into(), |a| format!("{a:.3}")),
                    m.d_process_size
                );
            }
            println!(
                "baseline {:.3}  sft {:.3}  final {:.3}",
                report.baseline_pass_at_1, report.sft_pass_at_1, report.final_pass_at_1
            );
        }
        Command::Eval { policy } => {
            let model: PolicyModel = io::read_json(policy)?;
            println!(
                "{:.4}",
                pass_at_1(&model, &split.heldout, cfg.policy.max_steps)
            );
        }
        Command::Report => {
            let r = read_report(out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
