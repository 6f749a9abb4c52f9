//! Batch runner for online feedback optimization experiments: manifests,
//! subcommands and CSV/SVG emission.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod output;

pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK};
