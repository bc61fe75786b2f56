use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{validate_replications, AllocationStrategy, ScorerKind};
use super::pipeline::{fit_scales, plan_for};
use crate::conformal::{check_alpha, set_from_pvalues, MethodId};
use crate::error::{Error, Result};
use crate::models::TrainingConfig;
use crate::multiscale::intersect_sets;
use crate::seeds::{derive_seed, rng_for};
use crate::synth::{draw_feature_grid, draw_label, generate_dataset, SplitIndices, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTableConfig {
    /// `noise_sd` is replaced by each entry of `noise_levels`.
    #[serde(flatten)]
    pub synth: SynthConfig,
    #[serde(flatten)]
    pub training: TrainingConfig,
    pub noise_levels: Vec<f64>,
    pub alpha: f64,
    pub allocation: AllocationStrategy,
    pub scorer: ScorerKind,
    pub replications: usize,
    /// Size of the frozen test grid.
    pub test_points: usize,
    /// Fraction of each replication's data used for training; the rest
    /// calibrates.
    pub train_fraction: f64,
}

impl Default for NoiseTableConfig {
    fn default() -> Self {
        NoiseTableConfig {
            synth: SynthConfig::default(),
            training: TrainingConfig::default(),
            noise_levels: vec![0.05, 0.10, 0.15, 0.20],
            alpha: 0.1,
            allocation: AllocationStrategy::Uniform,
            scorer: ScorerKind::Logistic,
            replications: 200,
            test_points: 300,
            train_fraction: 0.5,
        }
    }
}

impl NoiseTableConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.training.validate()?;
        check_alpha(self.alpha)?;
        validate_replications(self.replications)?;
        if self.noise_levels.is_empty() {
            return Err(Error::config("noise_levels", "must not be empty"));
        }
        if let Some(bad) = self.noise_levels.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::config("noise_levels", format!("{bad} is not a finite value >= 0")));
        }
        if self.test_points == 0 {
            return Err(Error::config("test_points", "must be at least 1"));
        }
        train_calib_split(self.synth.n_points, self.train_fraction, 0).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTableRow {
    pub noise: f64,
    pub overall_coverage: f64,
    pub pw_mean: f64,
    pub pw_min: f64,
    pub pw_max: f64,
    /// Mean multi-scale set size.
    pub band_width: f64,
    pub efficiency: f64,
}

/// `band_width / overall_coverage`.
pub fn efficiency_score(band_width: f64, overall_coverage: f64) -> f64 {
    band_width / overall_coverage
}

/// Shuffled two-way split with an empty test part.
pub(crate) fn train_calib_split(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let n_train = (n as f64 * train_fraction).round() as usize;
    if !(train_fraction > 0.0 && train_fraction < 1.0) || n_train == 0 || n_train >= n {
        return Err(Error::config(
            "train_fraction",
            format!("{train_fraction} leaves an empty part of {n} points"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        calib: order[n_train..].to_vec(),
        test: Vec::new(),
    })
}

struct RepOutcome {
    covered: Vec<bool>,
    size: usize,
}

fn replicate(
    config: &NoiseTableConfig,
    synth: &SynthConfig,
    level_base: u64,
    grid: &[Vec<f64>],
    r: u64,
) -> Result<RepOutcome> {
    let data = generate_dataset(&SynthConfig {
        seed: derive_seed(level_base, "data", r),
        ..synth.clone()
    })?;
    let split = train_calib_split(data.len(), config.train_fraction, derive_seed(level_base, "split", r))?;
    let fitted = fit_scales(&data, &split, config.scorer, &config.training)?;
    let plan = plan_for(config.allocation, &fitted, config.alpha)?;
    let edges = synth.bin_edges();
    let mut label_rng = rng_for(level_base, "test_labels", r);
    let mut covered = Vec::with_capacity(grid.len());
    let mut size = 0;
    for x in grid {
        let y = draw_label(synth, &edges, x, &mut label_rng);
        let sets = fitted
            .pvalues(x)?
            .iter()
            .zip(plan.alphas())
            .enumerate()
            .map(|(s, (p, &a))| set_from_pvalues(MethodId::Scale(s + 1), &fitted.labels, p, a))
            .collect::<Vec<_>>();
        let multi = intersect_sets(&sets)?;
        covered.push(multi.contains(y));
        size += multi.len();
    }
    Ok(RepOutcome { covered, size })
}

/// One row per noise level. The test features are drawn once per level and
/// frozen; every replication redraws the training and calibration data and
/// the test labels, so pointwise coverage is a per-point frequency across
/// replications.
pub fn run_noise_table(config: &NoiseTableConfig) -> Result<Vec<NoiseTableRow>> {
    config.validate()?;
    config
        .noise_levels
        .iter()
        .enumerate()
        .map(|(l, &noise)| {
            let synth = SynthConfig { noise_sd: noise, ..config.synth.clone() };
            let level_base = derive_seed(config.synth.seed, "noise_level", l as u64);
            let grid = draw_feature_grid(&synth, config.test_points, &mut rng_for(level_base, "test_grid", 0));
            let reps: Vec<RepOutcome> = (0..config.replications as u64)
                .into_par_iter()
                .map(|r| replicate(config, &synth, level_base, &grid, r))
                .collect::<Result<_>>()?;

            let n_reps = reps.len() as f64;
            let mut hits = vec![0usize; grid.len()];
            let mut size = 0;
            for rep in &reps {
                for (h, &c) in hits.iter_mut().zip(&rep.covered) {
                    *h += usize::from(c);
                }
                size += rep.size;
            }
            let pointwise: Vec<f64> = hits.iter().map(|&h| h as f64 / n_reps).collect();
            let total = n_reps * grid.len() as f64;
            let overall_coverage = hits.iter().sum::<usize>() as f64 / total;
            let band_width = size as f64 / total;
            Ok(NoiseTableRow {
                noise,
                overall_coverage,
                pw_mean: pointwise.iter().sum::<f64>() / pointwise.len() as f64,
                pw_min: pointwise.iter().copied().fold(f64::INFINITY, f64::min),
                pw_max: pointwise.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                band_width,
                efficiency: efficiency_score(band_width, overall_coverage),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NoiseTableConfig {
        NoiseTableConfig {
            synth: SynthConfig { n_points: 300, ..SynthConfig::default() },
            training: TrainingConfig { epochs: 200, ..TrainingConfig::default() },
            replications: 6,
            test_points: 40,
            ..NoiseTableConfig::default()
        }
    }

    #[test]
    fn reference_row_ratio() {
        assert!((efficiency_score(2.897, 0.867) - 3.3414).abs() < 1e-4);
    }

    #[test]
    fn row_invariants() {
        let rows = run_noise_table(&small()).unwrap();
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert!(r.pw_min <= r.pw_mean && r.pw_mean <= r.pw_max);
            assert!((r.pw_mean - r.overall_coverage).abs() < 1e-12);
            assert!((r.efficiency - r.band_width / r.overall_coverage).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_noise_oracle_always_covers() {
        let config = NoiseTableConfig {
            noise_levels: vec![0.0],
            scorer: ScorerKind::Oracle,
            ..small()
        };
        let rows = run_noise_table(&config).unwrap();
        assert_eq!(rows[0].overall_coverage, 1.0);
        assert_eq!(rows[0].pw_min, 1.0);
        assert_eq!(rows[0].band_width, 1.0);
    }

    #[test]
    fn negative_noise_rejected() {
        let config = NoiseTableConfig { noise_levels: vec![0.1, -0.2], ..small() };
        assert!(run_noise_table(&config).unwrap_err().to_string().contains("-0.2"));
    }

    #[test]
    fn deterministic() {
        assert_eq!(run_noise_table(&small()).unwrap(), run_noise_table(&small()).unwrap());
    }
}
