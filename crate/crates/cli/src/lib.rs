//! Experiment driver around `splinter-core`: config files, dataset loading,
//! model persistence, the training pipelines and report emission. The
//! `splinter` binary is a thin argument parser over these modules, so
//! integration tests can run whole experiments in-process.

pub mod config;
pub mod data;
pub mod error;
pub mod model_io;
pub mod pipeline;
pub mod report;

pub use error::{CliError, Result};
