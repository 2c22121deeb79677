//! Experiment harness behind the `stgbgru` binary: configuration handling
//! and the subcommands, callable without going through the process.

pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_evaluate, cmd_graph, cmd_predict, cmd_synthetic, cmd_train};
pub use config::ExperimentConfig;
