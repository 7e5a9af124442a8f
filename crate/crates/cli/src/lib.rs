//! Command-line front end: configuration, pipeline orchestration and the
//! `mdfr` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::run;
pub use config::{validate_config, RunConfig};
pub use error::{CliError, Result};
pub use pipeline::Run;
