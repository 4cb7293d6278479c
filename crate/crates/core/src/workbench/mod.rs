//! Data generation and ingestion, run configuration, and the experiment
//! runners behind the command-line tool.

pub mod config;
pub mod data;
pub mod experiments;

pub use config::{schema, ExperimentKind, KeySpec, RunConfig};
pub use data::*;
pub use experiments::{run_experiment, toy_optimum_bits_per_dim, Outcome};
