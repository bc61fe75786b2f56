//! Monte Carlo studies: coverage/size sweeps, the noise table, the
//! dependence study and the asymptotic study.
//!
//! Every study is a pure function of its config. Replication `r` draws all
//! of its randomness from seeds derived from the base seed and `r` (see
//! [`crate::seeds`]); replications run in parallel and are reduced in index
//! order, so results do not depend on scheduling.

mod asymptotic;
mod config;
mod dependence;
mod noise;
mod output;
mod pipeline;
mod sweep;

pub use asymptotic::{minimal_oracle_set, run_asymptotic_study, AsymptoticConfig, AsymptoticRow};
pub use config::{resolve_config, AllocationStrategy, ScorerKind};
pub use dependence::{run_dependence_study, DependenceConfig, DependenceRow};
pub use noise::{efficiency_score, run_noise_table, NoiseTableConfig, NoiseTableRow};
pub use output::{
    asymptotic_csv, dependence_csv, noise_table_csv, sweep_csv, write_study, StudyOutput,
};
pub use pipeline::{evaluate_split, fit_scales, plan_for, FittedScales};
pub use sweep::{run_coverage_sweep, SweepConfig, SweepMethod, SweepResult, SweepRow};

use serde::{Deserialize, Serialize};

use crate::conformal::{Label, PredictionSet};
use crate::error::{Error, Result};

/// Fraction of points whose true label is in the prediction set.
pub fn empirical_coverage(covered: &[bool]) -> Result<f64> {
    if covered.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64)
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// `1 - alpha - 3 sqrt(alpha (1 - alpha) / n)`: the Monte Carlo floor for
/// pooled coverage at nominal level `1 - alpha` over `n` evaluations.
pub fn coverage_floor(alpha: f64, n: usize) -> f64 {
    1.0 - alpha - 3.0 * binomial_se(alpha, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub members: Vec<Label>,
    pub covered: bool,
    pub size: usize,
}

/// Per-point outcomes of one method on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub records: Vec<PointRecord>,
    pub coverage: f64,
    pub mean_size: f64,
}

impl MethodResult {
    pub fn from_sets(method: impl Into<String>, sets: &[PredictionSet], truth: &[Label]) -> Result<Self> {
        if sets.len() != truth.len() {
            return Err(Error::ShapeError {
                expected: truth.len(),
                got: sets.len(),
            });
        }
        let records: Vec<PointRecord> = sets
            .iter()
            .zip(truth)
            .map(|(s, &y)| PointRecord {
                members: s.members().to_vec(),
                covered: s.contains(y),
                size: s.len(),
            })
            .collect();
        let covered: Vec<bool> = records.iter().map(|r| r.covered).collect();
        let coverage = empirical_coverage(&covered)?;
        let mean_size = records.iter().map(|r| r.size).sum::<usize>() as f64 / records.len() as f64;
        Ok(MethodResult {
            method: method.into(),
            records,
            coverage,
            mean_size,
        })
    }
}
