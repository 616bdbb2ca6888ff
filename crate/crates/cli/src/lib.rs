//! Configuration loading, price ingestion and experiment orchestration for
//! the `futopt` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod ingest;

pub use config::{load_config, parse_config, Experiment, ScenarioConfig};
pub use error::CliError;
pub use experiments::{run_experiment, RunOptions, RunSummary};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "FUTOPT_WORKERS";
