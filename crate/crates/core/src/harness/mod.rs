//! Experiment runner: configuration, seed and method grids, metric files.

pub mod config;
pub mod emit;
pub mod run;

pub use config::{parse_override, ExperimentConfig, ThresholdMetric};
pub use emit::{emit, write_atomic, OutputFormat, CURVE_HEADER};
pub use run::{
    median, median_steps, run_experiment, run_single, steps_to_threshold, summarize,
    MethodSummary, RunRecord, RunSummary,
};
