//! Experiment harness: datasets on disk, checkpoints, stage orchestration
//! with content-addressed caching, the results ledger and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod export;
pub mod ledger;
pub mod models;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Overrides, Stage};
pub use error::{HarnessError, Result};
pub use pipeline::{Harness, Outcome, Status};
