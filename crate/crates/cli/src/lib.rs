//! Command-line front end for the activation-steering engine: experiment
//! configuration, run manifests, and the `actrev` subcommands.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{run, run_from};
