//! Action-chunked PPO with self behavior cloning.
//!
//! A small policy-gradient post-training stack: a chunked Gaussian actor and
//! critic on top of a hand-written MLP, PPO losses computed per action chunk,
//! a demonstration buffer that admits the agent's own short successful
//! episodes, and sparse-reward planar tasks with scripted experts.

pub mod cli;
pub mod config;
pub mod demobuffer;
pub mod envs;
pub mod numcore;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod trainer;

pub use config::{Ablation, Method, TrainConfig};
pub use envs::Task;
pub use trainer::{evaluate, train, EvalReport, TrainOutcome};
