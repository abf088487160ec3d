//! Seeded experiment harness around `cl_lab_core`.
//!
//! Every command writes CSVs with fixed schemas plus a `<command>.manifest`
//! sidecar into the output directory; `report` renders tables and SVG
//! figures from those CSVs alone.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
