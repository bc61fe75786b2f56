use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{validate_replications, AllocationStrategy, ScorerKind};
use super::pipeline::{fit_scales, plan_for};
use crate::conformal::{check_alpha, set_from_pvalues, LabelSpace, MethodId, PredictionSet};
use crate::error::{Error, Result};
use crate::models::{OracleModel, TrainingConfig};
use crate::multiscale::intersect_sets;
use crate::seeds::{derive_seed, rng_for};
use crate::synth::{draw_feature_grid, generate_dataset, SplitIndices, SynthConfig};

/// Slack on the cumulative-mass comparison so that sums like
/// `0.7 + 0.2` still reach `0.9`.
const MASS_TOLERANCE: f64 = 1e-12;

/// Smallest label set whose conditional mass reaches `1 - alpha`.
///
/// Labels are taken in order of descending probability (ties by label
/// order) until the cumulative mass is at least `1 - alpha`; labels tied
/// with the last one taken are included as well.
///
/// ```
/// use mscp::experiments::minimal_oracle_set;
/// let set = minimal_oracle_set(&[0.5, 0.3, 0.15, 0.05], 0.1).unwrap();
/// assert_eq!(set.members(), &[0, 1, 2]);
/// ```
pub fn minimal_oracle_set(conditional: &[f64], alpha: f64) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    if conditional.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "{} entries; need at least 2",
            conditional.len()
        )));
    }
    if let Some(bad) = conditional.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
    }
    let total: f64 = conditional.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
    }
    let mut order: Vec<usize> = (0..conditional.len()).collect();
    order.sort_by(|&a, &b| conditional[b].total_cmp(&conditional[a]).then(a.cmp(&b)));
    let mut mask = vec![false; conditional.len()];
    let mut mass = 0.0;
    let mut threshold = f64::INFINITY;
    for &y in &order {
        if mass >= 1.0 - alpha - MASS_TOLERANCE && conditional[y] < threshold {
            break;
        }
        mask[y] = true;
        mass += conditional[y];
        threshold = conditional[y];
    }
    let labels = LabelSpace::range(conditional.len())?;
    Ok(PredictionSet::from_mask(MethodId::Oracle, &labels, &mask, alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticConfig {
    #[serde(flatten)]
    pub synth: SynthConfig,
    /// Calibration sizes, strictly increasing.
    pub n_grid: Vec<usize>,
    pub alpha: f64,
    pub allocation: AllocationStrategy,
    pub replications: usize,
    /// Size of the frozen test grid.
    pub test_points: usize,
}

impl Default for AsymptoticConfig {
    fn default() -> Self {
        AsymptoticConfig {
            synth: SynthConfig { noise_sd: 0.5, ..SynthConfig::default() },
            n_grid: vec![100, 200, 500, 1000, 2000, 5000],
            alpha: 0.1,
            allocation: AllocationStrategy::Uniform,
            replications: 100,
            test_points: 200,
        }
    }
}

impl AsymptoticConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        check_alpha(self.alpha)?;
        validate_replications(self.replications)?;
        if self.n_grid.is_empty() {
            return Err(Error::config("n_grid", "must not be empty"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("n_grid", format!("{:?} is not strictly increasing", self.n_grid)));
        }
        if self.n_grid[0] < self.synth.n_scales + self.synth.n_classes {
            return Err(Error::config("n_grid", format!("{} is too small", self.n_grid[0])));
        }
        if self.test_points == 0 {
            return Err(Error::config("test_points", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticRow {
    /// Calibration size.
    pub n: usize,
    /// Mean `|C_n symmetric-difference C*|` over points and replications.
    pub mean_sym_diff: f64,
    /// Standard error of the per-replication means.
    pub se: f64,
    pub mean_size: f64,
    pub mean_oracle_size: f64,
    /// Fraction of points where the multi-scale set equals the component
    /// set at the largest allocated level.
    pub equals_max_component: f64,
}

struct RepOutcome {
    sym_diff: usize,
    size: usize,
    equal: usize,
}

fn sym_diff(a: &PredictionSet, b: &PredictionSet) -> usize {
    a.members().iter().filter(|&&y| !b.contains(y)).count()
        + b.members().iter().filter(|&&y| !a.contains(y)).count()
}

/// Oracle scorers at every scale, calibrated on `n` fresh points for each
/// `n` in the grid, compared with the minimal oracle set on a frozen grid.
pub fn run_asymptotic_study(config: &AsymptoticConfig) -> Result<Vec<AsymptoticRow>> {
    config.validate()?;
    let base = config.synth.seed;
    let grid = draw_feature_grid(&config.synth, config.test_points, &mut rng_for(base, "test_grid", 0));
    let oracle = OracleModel::new(&config.synth)?;
    let targets: Vec<PredictionSet> = grid
        .iter()
        .map(|x| minimal_oracle_set(&oracle.conditional(x), config.alpha))
        .collect::<Result<_>>()?;
    let oracle_size = targets.iter().map(PredictionSet::len).sum::<usize>() as f64 / grid.len() as f64;

    config
        .n_grid
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let n_base = derive_seed(base, "n_grid", j as u64);
            let reps: Vec<RepOutcome> = (0..config.replications as u64)
                .into_par_iter()
                .map(|r| {
                    let data = generate_dataset(&SynthConfig {
                        n_points: n,
                        seed: derive_seed(n_base, "calib", r),
                        ..config.synth.clone()
                    })?;
                    let split = SplitIndices { train: Vec::new(), calib: (0..n).collect(), test: Vec::new() };
                    let fitted = fit_scales(&data, &split, ScorerKind::Oracle, &TrainingConfig::default())?;
                    let plan = plan_for(config.allocation, &fitted, config.alpha)?;
                    let widest = plan
                        .alphas()
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &a)| if a > plan.alphas()[best] { i } else { best });
                    let mut out = RepOutcome { sym_diff: 0, size: 0, equal: 0 };
                    for (x, target) in grid.iter().zip(&targets) {
                        let sets = fitted
                            .pvalues(x)?
                            .iter()
                            .zip(plan.alphas())
                            .enumerate()
                            .map(|(s, (p, &a))| set_from_pvalues(MethodId::Scale(s + 1), &fitted.labels, p, a))
                            .collect::<Vec<_>>();
                        let multi = intersect_sets(&sets)?;
                        out.sym_diff += sym_diff(&multi, target);
                        out.size += multi.len();
                        out.equal += usize::from(multi.members() == sets[widest].members());
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;

            let points = grid.len() as f64;
            let per_rep: Vec<f64> = reps.iter().map(|r| r.sym_diff as f64 / points).collect();
            let k = per_rep.len() as f64;
            let mean = per_rep.iter().sum::<f64>() / k;
            let se = if per_rep.len() > 1 {
                (per_rep.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            let total = k * points;
            Ok(AsymptoticRow {
                n,
                mean_sym_diff: mean,
                se,
                mean_size: reps.iter().map(|r| r.size).sum::<usize>() as f64 / total,
                mean_oracle_size: oracle_size,
                equals_max_component: reps.iter().map(|r| r.equal).sum::<usize>() as f64 / total,
            })
        })
        .collect()
}
