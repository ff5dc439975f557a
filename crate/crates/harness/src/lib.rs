//! Experiment orchestration for the diffguard defense: configuration,
//! per-seed runs, sweeps and ablations, plots and reports.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod plots;
pub mod report;

pub use config::{AttackKind, DatasetSpec, ExperimentConfig};
pub use experiment::Run;
pub use report::{run_experiment, Report};
