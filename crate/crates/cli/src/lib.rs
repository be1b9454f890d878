//! Configuration, commands and reports for the `latentfs` binary.

pub mod app;
pub mod commands;
pub mod config;
pub mod report;

pub use app::{run, Failure};
pub use config::ExperimentConfig;
