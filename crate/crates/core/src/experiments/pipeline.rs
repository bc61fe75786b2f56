use std::sync::Arc;

use super::config::{AllocationStrategy, ScorerKind};
use super::MethodResult;
use crate::conformal::{
    label_pvalues, score_calibration, set_from_pvalues, CalibrationScores, ConformityScorer,
    Label, LabelSpace, MethodId, PValue, PredictionSet,
};
use crate::error::{Error, Result};
use crate::models::{logistic_scorer, oracle_scorer, train_logistic, OracleModel, TrainingConfig};
use crate::multiscale::{
    allocate_optimal_with_floor, allocate_uniform, default_grid, estimate_size_curve,
    intersect_sets, AllocationPlan,
};
use crate::synth::{Dataset, SplitIndices};

/// Calibrated scorers for every scale of one replication.
#[derive(Debug, Clone)]
pub struct FittedScales {
    pub scorers: Vec<ConformityScorer>,
    pub calibs: Vec<CalibrationScores>,
    /// Calibration features, reused to estimate size curves.
    pub calib_points: Vec<Vec<f64>>,
    pub labels: LabelSpace,
}

impl FittedScales {
    pub fn n_scales(&self) -> usize {
        self.scorers.len()
    }

    /// p-values per scale for one point, in label order.
    pub fn pvalues(&self, x: &[f64]) -> Result<Vec<Vec<PValue>>> {
        self.scorers
            .iter()
            .zip(&self.calibs)
            .map(|(s, c)| label_pvalues(s, c, x, &self.labels))
            .collect()
    }
}

/// Trains (for [`ScorerKind::Logistic`]) on the train split and calibrates
/// every scale on the calibration split. Scale `k` (1-based) sees feature
/// column `k - 1` only.
pub fn fit_scales(
    dataset: &Dataset,
    split: &SplitIndices,
    kind: ScorerKind,
    training: &TrainingConfig,
) -> Result<FittedScales> {
    let n_scales = dataset.n_scales();
    let n_classes = dataset
        .config
        .as_ref()
        .map_or_else(|| dataset.n_classes(), |c| c.n_classes);
    let labels = LabelSpace::range(n_classes)?;
    let calib = dataset.rows(&split.calib);
    let scorers: Vec<ConformityScorer> = match kind {
        ScorerKind::Logistic => {
            let train = dataset.rows(&split.train);
            (0..n_scales)
                .map(|k| {
                    let model = train_logistic(&train, &[k], n_classes, training)?;
                    Ok(logistic_scorer(Arc::new(model), k + 1))
                })
                .collect::<Result<_>>()?
        }
        ScorerKind::Oracle => {
            let config = dataset.config.as_ref().ok_or_else(|| {
                Error::config("scorer", "the oracle scorer needs a generated dataset")
            })?;
            let oracle = Arc::new(OracleModel::new(config)?);
            (0..n_scales)
                .map(|k| oracle_scorer(Arc::clone(&oracle), k + 1))
                .collect()
        }
    };
    let calibs = scorers
        .iter()
        .map(|s| score_calibration(s, &calib))
        .collect::<Result<Vec<_>>>()?;
    Ok(FittedScales {
        scorers,
        calibs,
        calib_points: calib.into_iter().map(|(x, _)| x).collect(),
        labels,
    })
}

/// Allocation from calibration data only; test data never reaches here.
pub fn plan_for(
    strategy: AllocationStrategy,
    fitted: &FittedScales,
    alpha: f64,
) -> Result<AllocationPlan> {
    let k = fitted.n_scales();
    match strategy {
        AllocationStrategy::Uniform => allocate_uniform(alpha, k),
        AllocationStrategy::Optimal => {
            let grid = default_grid(alpha, k);
            let curves = fitted
                .scorers
                .iter()
                .zip(&fitted.calibs)
                .map(|(s, c)| estimate_size_curve(s, c, &fitted.calib_points, &fitted.labels, &grid))
                .collect::<Result<Vec<_>>>()?;
            let n_calib = fitted.calibs[0].len();
            allocate_optimal_with_floor(&curves, alpha, 1.0 / (n_calib + 1) as f64)
        }
    }
}

/// Per-scale sets at the planned levels and the multi-scale set for every
/// point: one [`MethodResult`] per scale, then `multiscale`.
pub fn evaluate_split(
    fitted: &FittedScales,
    plan: &AllocationPlan,
    points: &[Vec<f64>],
    truth: &[Label],
) -> Result<Vec<MethodResult>> {
    let k = fitted.n_scales();
    let mut per_scale: Vec<Vec<PredictionSet>> = vec![Vec::with_capacity(points.len()); k];
    let mut combined = Vec::with_capacity(points.len());
    for x in points {
        let pv = fitted.pvalues(x)?;
        let sets: Vec<PredictionSet> = pv
            .iter()
            .zip(plan.alphas())
            .enumerate()
            .map(|(s, (p, &a))| set_from_pvalues(MethodId::Scale(s + 1), &fitted.labels, p, a))
            .collect();
        combined.push(intersect_sets(&sets)?);
        for (bucket, set) in per_scale.iter_mut().zip(sets) {
            bucket.push(set);
        }
    }
    let mut out = per_scale
        .iter()
        .enumerate()
        .map(|(s, sets)| MethodResult::from_sets(MethodId::Scale(s + 1).to_string(), sets, truth))
        .collect::<Result<Vec<_>>>()?;
    out.push(MethodResult::from_sets(MethodId::Multiscale.to_string(), &combined, truth)?);
    Ok(out)
}
