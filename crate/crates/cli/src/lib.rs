//! Experiment front-end: dataset generation, single trainings, seed-swept
//! mode comparisons and anchor inspection. The `sar` binary is a thin
//! argument parser over [`commands`].

pub mod commands;
pub mod config;
pub mod error;

pub use config::{ConfigBuilder, ExperimentConfig, KEYS};
pub use error::CliError;
