//! Multi-scale conformal prediction for finite label spaces.
//!
//! Each scale has its own conformity score and calibration split. A label
//! survives at scale `k` when its conformal p-value exceeds `alpha_k`, and
//! the multi-scale prediction set is the intersection over scales. With
//! `alpha_1 + ... + alpha_K = alpha` the intersection keeps marginal
//! coverage `1 - alpha` and is never larger than any single-scale set.
//!
//! Modules:
//!
//! - [`conformal`]: scores, p-values and single-scale sets.
//! - [`multiscale`]: intersection and miscoverage allocation.
//! - [`models`]: softmax regression per scale and the oracle scorer.
//! - [`synth`]: the synthetic multi-scale generator.
//! - [`experiments`]: the Monte Carlo studies and their CSV outputs.
//!
//! The guide under `book/` walks through the same material; its code
//! snippets are compiled and run as doctests of this crate.

pub mod conformal;
pub mod error;
pub mod experiments;
pub mod io;
pub mod isotonic;
pub mod models;
pub mod multiscale;
pub mod seeds;
pub mod synth;

pub use conformal::{
    conformal_pvalue, prediction_set, score_calibration, transductive_pvalue, CalibrationScores,
    ConformityScorer, Label, LabelSpace, MethodId, PValue, PredictionSet,
};
pub use error::{Error, Result};
pub use multiscale::{
    allocate_optimal, allocate_uniform, estimate_size_curve, intersect_sets, multiscale_predict,
    AllocationPlan, SizeCurve,
};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/p-values.md")]
    struct PValues;
    #[doc = include_str!("../../../book/src/intersection.md")]
    struct Intersection;
    #[doc = include_str!("../../../book/src/allocation.md")]
    struct Allocation;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/studies.md")]
    struct Studies;
}
