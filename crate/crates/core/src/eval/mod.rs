//! Scoring pruned models on the toy driving task, and the experiment grids
//! built on top of it.

mod harness;
mod task;

pub use harness::{
    calibration_defaults, AggregateRow, CellConfig, CellResult, ExperimentResult, Harness, Method, Summary, SweepGrid,
    CALIBRATION_SPARSITY, DEFAULT_SEEDS, SCOPE_SPARSITIES,
};
pub use task::{score, targets, Metrics, ToyTask, EVAL_SEED, N_EVAL, OUTPUT_WIDTH};
