//! Library side of the `lmmpqs` command: run configuration, flag parsing and
//! the command implementations.

pub mod args;
pub mod commands;
pub mod config;

pub use args::Cli;
pub use commands::{execute, exit_code};
pub use config::RunConfig;
