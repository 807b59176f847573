//! Experiment harness around `c2d-core`: configuration files, run
//! directories, the stage CLI, cross-run reports, and sweeps.

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use io::RunDir;
