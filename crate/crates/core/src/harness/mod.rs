//! Experiment orchestration: scenarios, configuration, pipelines, sweeps
//! and plots.

pub mod config;
pub mod pipeline;
pub mod plots;
pub mod scenario;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{run_experiment, RunOutcome, RunSummary};
pub use scenario::{apply_scenario, parse_scenario, ScenarioSpec};
pub use sweep::{cluster_sweep, grid_sweep};
