//! Experiment orchestration: configuration, zoo, datasets, the shared lab,
//! the experiments and their reports.

pub mod config;
pub mod dataset;
pub mod experiments;
pub mod lab;
pub mod report;
pub mod zoo;

pub use config::ExperimentConfig;
pub use experiments::{run_experiment, run_robustness, run_similarity_experiment, run_transferability, run_utility_experiment};
pub use lab::{Defense, Lab};
pub use report::ReportRow;
pub use zoo::{generate_zoo, Zoo};
