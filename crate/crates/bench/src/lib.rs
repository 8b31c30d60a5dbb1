//! Experiment runner for the preference-based equilibrium learner: problem
//! registry, configuration files, run records and aggregation.

pub mod config;
pub mod error;
pub mod experiment;
pub mod record;
pub mod registry;

pub use config::ExperimentConfig;
pub use error::BenchError;
pub use experiment::{evaluate_run, run_experiment, run_repeats, Evaluation};
pub use record::{Aggregate, RunRecord};
pub use registry::{Problem, Registry};
