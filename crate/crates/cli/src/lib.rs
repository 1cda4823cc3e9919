//! Experiment runner for `bdlab-core`: configs, run records, the acceptance
//! suite and the `bdlab` command line.

pub mod app;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod record;
pub mod suite;

pub use config::{ExperimentConfig, Tolerance, EXPERIMENTS};
pub use error::CliError;
pub use experiments::{execute, run, Outcome};
pub use record::{Bound, Check, RunRecord, Table, ARTIFACT_VERSION};
pub use suite::{run_criterion, run_suite, CriterionOutcome, CRITERIA};
