//! Experiment harness: runs a grid of policies x corrupted streams x seeds
//! from a TOML config and writes per-cell metrics and a comparison table.

pub mod config;
pub mod report;
pub mod run;

pub use config::{DataSource, ExperimentConfig, StreamKind, StreamSpec, OUTPUT_ROOT_ENV};
pub use report::{render_report, Comparison, ComparisonRow};
pub use run::{
    cell_keys, run_cell, run_cells, run_experiment, write_outputs, AlphaSummary, CellKey, CellOutcome, CellResult,
    EvalData, ExperimentReport, MetricsRecord, QuintileStats,
};
