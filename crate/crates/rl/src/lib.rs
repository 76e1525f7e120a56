//! Rollouts and training for bounded-ratio policy optimization.
//!
//! [`env`] holds the desk-scale environments, [`rollout`] collects batches under
//! a frozen behavior policy, [`gae`] turns them into advantages and return
//! targets, [`losses`] builds the loss graphs and [`bpo`] runs the full loop.
//! [`gbpo`] is the group-relative variant on a synthetic sequence task.

pub mod bpo;
pub mod env;
pub mod error;
pub mod gae;
pub mod gbpo;
pub mod losses;
pub mod policy;
pub mod rollout;

pub use bpo::{train, Algo, AdvantageMode, BpoConfig, IterationStats, TrainingReport};
pub use env::{make_env, Action, ActionSpace, EnvParams, EnvStep, Environment, Observation};
pub use error::{RlError, Result};
pub use gae::GaeConfig;
pub use rollout::{Collector, TrajectoryBatch};
