//! Batch driver for the detection laboratory: dataset generation, pipeline
//! runs over seeds and ablation grids, and seed-averaged reports.

pub mod data;
pub mod error;
pub mod report;
pub mod run;
pub mod spec;

pub use data::cmd_generate;
pub use error::{CliError, Result};
pub use report::cmd_report;
pub use run::{cmd_replay, cmd_run};
pub use spec::{ExperimentSpec, RunConfig};
