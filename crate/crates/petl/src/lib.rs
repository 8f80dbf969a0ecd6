//! Experiment runner for `petl-core`: TOML configuration, delta checkpoints,
//! CSV/text reports, single runs, sweeps and merges. The `petl` binary is a
//! thin command-line front end over this library.

pub mod checkpoint;
pub mod config;
mod error;
pub mod report;
pub mod runner;

pub use error::{Error, Result};
