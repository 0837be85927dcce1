//! Practical sub-optimality diagnostics for reinforcement-learning runs.
//!
//! A run generates experience; its learned policy exploits some of it. This
//! crate measures the difference. An [`tracker::ExperienceTracker`] wraps a
//! training loop and records every finished episode. At any point it can
//! report the return of the best trajectory ever seen, the mean of the top 5%
//! of all returns and of recent returns, the learned policy's average return,
//! and the gaps between them. [`aggregate`] normalizes those gaps per task and
//! combines them across tasks with bootstrap confidence intervals.
//!
//! Desk-scale [`env`]ironments and tabular [`agents`] generate experience
//! streams with known optima, [`log_io`] reads and writes JSONL episode logs
//! so that runs from other trainers can be analyzed, and [`report`] holds the
//! curve tables, config format and SVG charts behind the `subopt` CLI.

pub mod agents;
pub mod aggregate;
pub mod env;
pub mod estimators;
pub mod log_io;
pub mod report;
pub mod tracker;
pub mod trajectory;

pub use agents::{run_experiment, Agent, AgentKind, AgentSpec, RunLog, RunSchedule};
pub use aggregate::{AggregateReport, TaskResult, Variant};
pub use env::{EnvKind, EnvSpec};
pub use estimators::{best_single, heuristic_optimal_bound, replay_verify, top_k_mean, TopKQuery};
pub use tracker::{ExperienceTracker, MetricsPoint, TrackerConfig};
pub use trajectory::{EpisodeRecord, PolicyMode, RunIdentity, Transition};
