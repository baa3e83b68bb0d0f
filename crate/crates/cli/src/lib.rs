//! Command-line pipeline and local HTTP service for the forecasting engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod forecast;
pub mod manifest;
pub mod service;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
