//! Configuration and subcommands of the `shellm` binary.

pub mod commands;
pub mod config;

pub use config::{load_config, AppConfig, CliOverrides, ConfigError, LoadedConfig};
