//! Command implementations behind the `diffkan` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{AblationConfig, DataConfig, RunConfig, CONFIG_FILE};
pub use error::{CliError, CliResult};
