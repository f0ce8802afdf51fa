//! Experiment driver for negdistill: TOML configs, training with checkpoints
//! and metrics, OOD evaluation reports, diagnostics and color histograms.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Context;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
