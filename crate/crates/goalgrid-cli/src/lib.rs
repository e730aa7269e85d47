//! Command-line companion to `goalgrid-core`: declarative run
//! configurations and artifact-writing commands wrapping the solver, the
//! boundary extractor, the path simulator, and the brute-force oracle.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{echo, load_config, run_id, ConfigError, RunConfig};
