use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::mcts::MctsConfig;
use crate::minilang::CorpusSpec;
use crate::prm::{LabelMode, Objective, DEFAULT_MARGIN, DEFAULT_MIN_VISITS};
use crate::rl::RewardConfig;
use crate::tcg::DpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Deepest skeleton the policy may define.
    pub grammar_depth: usize,
    pub feature_dim: usize,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
    /// Step cap for sampled and greedy trajectories.
    pub max_steps: usize,
    pub sft_lr: f64,
    pub sft_steps: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            grammar_depth: 2,
            feature_dim: 4096,
            init_scale: 0.1,
            max_steps: 16,
            sft_lr: 0.5,
            sft_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcgConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub pairs_per_problem: usize,
    /// Cases sampled per held-out problem when measuring pass rate.
    pub eval_per_problem: usize,
}

impl Default for TcgConfig {
    fn default() -> Self {
        let d = DpoConfig::default();
        TcgConfig {
            beta: d.beta,
            learning_rate: d.learning_rate,
            steps: d.steps,
            pairs_per_problem: 4,
            eval_per_problem: 12,
        }
    }
}

impl TcgConfig {
    pub fn dpo(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            learning_rate: self.learning_rate,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrmConfig {
    pub objective: Objective,
    pub labels: LabelMode,
    pub min_visits: u64,
    pub margin: f64,
    pub lr: f64,
    pub steps: usize,
}

impl Default for PrmConfig {
    fn default() -> Self {
        PrmConfig {
            objective: Objective::Point,
            labels: LabelMode::Soft,
            min_visits: DEFAULT_MIN_VISITS,
            margin: DEFAULT_MARGIN,
            lr: 1.0,
            steps: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RlMethod {
    Reinforce,
    IterativeDpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub method: RlMethod,
    pub episodes_per_problem: usize,
    pub updates_per_iteration: usize,
    pub lr: f64,
    /// DPO temperature and inner steps, used by `iterative_dpo`.
    pub beta: f64,
    pub dpo_steps: usize,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            method: RlMethod::Reinforce,
            episodes_per_problem: 4,
            updates_per_iteration: 4,
            lr: 1.0,
            beta: 0.1,
            dpo_steps: 20,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Self-play cycles after SFT.
    pub iterations: usize,
    /// Share of the corpus held out for evaluation.
    pub eval_fraction: f64,
    /// Problems generated for each fresh synthesis batch.
    pub fresh_problems: usize,
    pub corpus: CorpusSpec,
    pub policy: PolicyConfig,
    pub mcts: MctsConfig,
    pub tcg: TcgConfig,
    pub prm: PrmConfig,
    pub rl: RlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            iterations: 2,
            eval_fraction: 0.2,
            fresh_problems: 20,
            corpus: CorpusSpec::default(),
            policy: PolicyConfig::default(),
            mcts: MctsConfig::default(),
            tcg: TcgConfig::default(),
            prm: PrmConfig::default(),
            rl: RlConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, OrchestratorError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie strictly between 0 and 1".into());
        }
        let held = self.heldout_count();
        if held == 0 || held >= self.corpus.count {
            return bad(format!(
                "eval split of {held} leaves no train or no eval problems"
            ));
        }
        if self.corpus.max_depth == 0 || self.corpus.max_depth > 5 {
            return bad("corpus.max_depth must lie in 1..=5".into());
        }
        if self.corpus.eval_cases == 0 {
            return bad("corpus.eval_cases must be positive".into());
        }
        if self.policy.grammar_depth == 0 || self.policy.grammar_depth > 5 {
            return bad("policy.grammar_depth must lie in 1..=5".into());
        }
        if self.policy.feature_dim == 0 {
            return bad("policy.feature_dim must be positive".into());
        }
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return bad("policy.init_scale must be finite and non-negative".into());
        }
        if self.policy.max_steps < 2 {
            return bad("policy.max_steps must be at least 2".into());
        }
        self.mcts
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        if self.tcg.beta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("tcg.beta must be positive".into());
        }
        if self.tcg.eval_per_problem == 0 {
            return bad("tcg.eval_per_problem must be positive".into());
        }
        if self.rl.beta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("rl.beta must be positive".into());
        }
        self.rl
            .reward
            .validate()
            .map_err(|m| OrchestratorError::Config(format!("rl.reward: {m}")))?;
        Ok(())
    }

    pub fn heldout_count(&self) -> usize {
        (self.corpus.count as f64 * self.eval_fraction).round() as usize
    }
}
