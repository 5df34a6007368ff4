//! Command-line driver: configuration, the data/train/eval pipeline and
//! the `pfnet` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
