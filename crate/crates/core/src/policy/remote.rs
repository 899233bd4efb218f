//! Step generation by a chat-completions HTTP endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::grammar::{ReasoningStep, STEP_DELIMITER};
use crate::minilang::Problem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_tokens() -> u32 {
    64
}

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("reply is not a reasoning step: {0:?}")]
    UnparseableStep(String),
}

impl From<ureq::Error> for RemoteError {
    fn from(e: ureq::Error) -> Self {
        match e {
            ureq::Error::Timeout(_) => RemoteError::Timeout,
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
                RemoteError::Timeout
            }
            other => RemoteError::Transport(other.to_string()),
        }
    }
}

#[derive(Deserialize)]
struct Reply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

const SYSTEM_PROMPT: &str = "Write the next step of a plan for the program described. \
Answer with exactly one line in one of these forms: `define <skeleton>`, \
`refine <hole> <token>` or `emit <tokens>`.";

pub struct RemoteStepGenerator {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteStepGenerator {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        RemoteStepGenerator { config, agent }
    }

    /// The user message: the question followed by the steps so far.
    pub fn render_prompt(problem: &Problem, prefix: &[ReasoningStep]) -> String {
        let mut out = problem.question.clone();
        for step in prefix {
            out.push_str(STEP_DELIMITER);
            out.push_str(&step.to_string());
        }
        out.push_str(STEP_DELIMITER);
        out
    }

    /// Sends `prompt` as the user message and returns the raw reply text.
    pub fn complete(&self, prompt: &str) -> Result<String, RemoteError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: Reply = req.send_json(&body)?.body_mut().read_json()?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| RemoteError::Transport("reply has no choices".into()))
    }

    pub fn next_step(
        &self,
        problem: &Problem,
        prefix: &[ReasoningStep],
    ) -> Result<ReasoningStep, RemoteError> {
        parse_reply(&self.complete(&Self::render_prompt(problem, prefix))?)
    }
}

/// Takes the first non-empty line of a reply as the step.
pub fn parse_reply(content: &str) -> Result<ReasoningStep, RemoteError> {
    let line = content
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    ReasoningStep::parse_text(line.trim_matches('`'))
        .ok_or_else(|| RemoteError::UnparseableStep(content.to_string()))
}
