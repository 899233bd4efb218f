//! The step policy: grammar, features, sampling and supervised training.

pub mod analysis;
pub mod grammar;
pub mod model;
pub mod remote;

use thiserror::Error;

pub use crate::features::DecisionPoint;

pub use grammar::{
    ActionKind, Grammar, Plan, PlanState, ReasoningStep, Skeleton, SlotKind, Trajectory,
    STEP_DELIMITER,
};
pub use model::{
    greedy_trajectory, sample_trajectory, sft_loss, step_features, train_sft, PolicyModel,
    SampledTrajectory, SftExample, StepDistribution, StepPolicy,
};
pub use remote::{parse_reply, RemoteConfig, RemoteError, RemoteStepGenerator};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged")]
    Divergence,
}
