//! Experiment harness for the desk-scale differential morph detector:
//! configuration, runners for every CLI verb, and artifact writers.

pub mod config;
pub mod runner;
pub mod svg;

pub use config::{ExperimentConfig, ProtocolKind};
pub use runner::{
    eval_records, exit_code, run_eval, run_gen_data, run_grid, run_metrics_file, run_protocol,
    run_train, DataSource,
};
