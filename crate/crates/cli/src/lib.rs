//! Experiment runner for the nullcontrol library: configuration, seeds,
//! subcommands and CSV/JSON/SVG emission.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use commands::{run, Command, RunReport};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
