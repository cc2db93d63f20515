//! Config-driven runs: dataset preparation, sequential training with
//! checkpoints, and reports over finished runs.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod runner;

pub use config::{apply_order, generate_named, ExperimentConfig};
pub use report::{load_run, render_report, Report, RunData};
pub use runner::{evaluate_run, run_experiment, RunManifest, RunOptions, RunSummary, TimingRecord};
