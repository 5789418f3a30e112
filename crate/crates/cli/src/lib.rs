//! Library behind the `hidiff` binary: configuration loading and the
//! subcommands, callable in-process.

pub mod commands;
pub mod config;

pub use commands::{Options, Run};
pub use config::RunConfig;
