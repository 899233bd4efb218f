//! Self-play + RL training of a step-level pseudocode coder.
//!
//! The pipeline runs over a small sandboxed expression language
//! ([`minilang`]). A test-case generator is tuned with DPO ([`tcg`]), Monte
//! Carlo tree search labels reasoning prefixes ([`mcts`]), a hashed log-linear
//! step policy is initialized by SFT ([`policy`]), a process reward model is
//! trained point-wise or pair-wise ([`prm`]), and the policy is improved with
//! a blended process/outcome reward ([`rl`]). [`orchestrator`] wires the
//! steps into the iterated self-play loop and owns persistence and metrics.

pub mod features;
pub mod mcts;
pub mod minilang;
pub mod orchestrator;
pub mod policy;
pub mod prm;
pub mod rl;
pub mod rng;
pub mod tcg;
