//! Batch front-end: configuration, fixtures, artifact directories and subcommands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod schema;

pub use config::{load, CheckName, ExperimentConfig, Loaded};
pub use error::CliError;
