//! Command-line front end for the `vcmi` estimators: single estimates,
//! benchmark sweeps and diagnostics of saved models.

pub mod config;
pub mod diagnose;
pub mod error;
pub mod estimate;
pub mod input;
pub mod output;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
