//! Library side of the `canopy` command-line tool.

pub mod commands;
pub mod config;

pub use config::RunConfig;
