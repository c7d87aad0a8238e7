//! Command-line front end: configuration loading, subcommands and report
//! emitters around `udgan-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod montage;

pub use commands::{run, Cli};
pub use config::{Preset, RunConfig};
pub use error::{CliError, CliResult};
