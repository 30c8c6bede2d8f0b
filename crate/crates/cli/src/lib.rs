//! Experiment runner: config parsing, training/inference/validation
//! dispatch, and checkpoint/metric writing.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_gen_data, cmd_run, cmd_validate, run_experiment, run_gen_data, run_validation};
pub use config::{ConfigError, ExperimentConfig};
