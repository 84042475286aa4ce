//! Experiment plumbing: configuration, dataset ingestion, training and
//! evaluation sweeps with CSV, JSON and SVG reports.

pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, Method, OperatorKind, Split, Stage};
pub use evaluate::{evaluate, Aggregate, RunManifest, RunOutputs};
pub use train::{train_stage, TrainOutcome};
