//! Optimization and experiment orchestration.

mod adam;
mod batching;
mod grid;
mod run;

pub use crate::ssl::warmup_weight;
pub use adam::{adam_step, AdamConfig, AdamState};
pub use batching::{unlabeled_batch, StratifiedSampler};
pub use grid::{
    read_report, run_grid, summarize, write_atomic, Aggregate, CellFailure, CellStats, GridCell,
    GridOptions, GridOutcome, Summary, FAILURES_JSON, REPORTS_DIR, SUMMARY_CSV, SUMMARY_TXT,
};
pub use run::{evaluate, train, EpochRecord, Selection, TrainConfig, TrainReport};
