//! Command-line front end for `semisup-core`: config files, dataset
//! directories, training runs, pseudo-label analysis and ablation grids.

pub mod ablate;
pub mod analyze;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
