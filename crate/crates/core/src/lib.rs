//! One-shot, fine-tuning-free pruning of layered models with
//! outlier-weighed layerwise sparsity.
//!
//! The pipeline is: collect input-activation norms on calibration data,
//! score every weight by `|W_ij| * ||X_j||_2`, measure each layer's outlier
//! ratio, give outlier-heavy layers lower sparsity, then mask the
//! lowest-importance weights of each layer.

pub mod allocation;
pub mod calibration;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod graph;
pub mod outlier;
pub mod prune;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quick-start.md")]
    mod quick_start {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/outliers.md")]
    mod outliers {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
