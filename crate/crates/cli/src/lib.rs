//! Experiment runner: versioned JSON configs in, JSONL metrics, JSON
//! checkpoints and a cross-seed summary out.

pub mod config;
pub mod csvio;
pub mod error;
pub mod metrics;
pub mod report;
pub mod tasks;

pub use config::{ExperimentConfig, Task};
pub use error::{CliError, CliResult, FieldError};
