//! Command-line front end: configuration, synthetic data and the
//! `crisisgraph` subcommands.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod synth;

pub use error::CliError;
