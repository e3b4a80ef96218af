//! Command-line front end of `randflight`: experiment configuration,
//! orchestration of the spectral and Monte Carlo pipelines, the validation
//! suite and the CSV/JSON outputs.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 numeric or output error.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Command, Invocation, Outcome};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
