//! Experiment harness: JSON-configured pretrain / finetune / sweep runs
//! on synthetic tasks, plus the built-in verification suite.

pub mod config;
pub mod pipeline;
pub mod verify;

pub use config::{Budget, ConfigError, ExperimentConfig, Overrides};
pub use pipeline::{run_sweep, SweepSummary};
