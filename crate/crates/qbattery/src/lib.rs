//! Configuration, file formats, experiment orchestration and the command
//! line around [`qbattery_core`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use qbattery_core as core;

pub use config::{ExperimentConfig, Mode};
pub use error::{Result, RunError};
