//! Command line front end: experiment configs in, flat result files out.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{prepare, run, CliError, Command, Exit, Outcome, Overrides};
pub use config::{
    ConfigError, ExperimentConfig, GainSpec, SetConfig, DEFAULT_CONFIG, SCHEMA_VERSION,
};
