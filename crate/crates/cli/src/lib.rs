//! Experiment runner for the random batch particle solvers: config files,
//! preset experiments, sweeps, CSV/JSON output and step-time benchmarks.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod error;
pub mod output;
pub mod runner;
mod args;

pub use args::{main_with_args, Cli, Command, CommonArgs};
pub use bench::{run_bench, BenchReport};
pub use config::{ConfigFile, ExperimentConfig, Overrides, Preset, Sweep, SweepAxis};
pub use error::{CliError, Result};
pub use output::SummaryRow;
pub use runner::{run_experiment, ExperimentReport};
