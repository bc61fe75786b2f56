use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::binomial_se;
use super::config::{validate_replications, AllocationStrategy, ScorerKind};
use super::pipeline::{fit_scales, plan_for};
use crate::conformal::{check_alpha, set_from_pvalues, MethodId};
use crate::error::{Error, Result};
use crate::models::TrainingConfig;
use crate::multiscale::intersect_sets;
use crate::seeds::derive_seed;
use crate::synth::{generate_dataset, split_dataset, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceConfig {
    /// `rho` is replaced by each entry of `rho_grid`.
    #[serde(flatten)]
    pub synth: SynthConfig,
    #[serde(flatten)]
    pub training: TrainingConfig,
    pub rho_grid: Vec<f64>,
    pub alpha: f64,
    pub allocation: AllocationStrategy,
    pub scorer: ScorerKind,
    pub replications: usize,
    pub split: [f64; 3],
}

impl Default for DependenceConfig {
    fn default() -> Self {
        DependenceConfig {
            synth: SynthConfig::default(),
            training: TrainingConfig::default(),
            rho_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            alpha: 0.1,
            allocation: AllocationStrategy::Uniform,
            scorer: ScorerKind::Logistic,
            replications: 500,
            split: [0.4, 0.3, 0.3],
        }
    }
}

impl DependenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.training.validate()?;
        check_alpha(self.alpha)?;
        validate_replications(self.replications)?;
        if self.rho_grid.is_empty() {
            return Err(Error::config("rho_grid", "must not be empty"));
        }
        if let Some(bad) = self.rho_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("rho_grid", format!("{bad} is outside [0, 1]")));
        }
        split_dataset(self.synth.n_points, self.split, 0).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub rho: f64,
    /// Pooled multi-scale coverage.
    pub coverage: f64,
    pub mean_size: f64,
    pub se_coverage: f64,
    pub n_evals: usize,
    /// Mean over replications of the largest allocated level.
    pub max_alpha: f64,
    /// Fraction of points where the multi-scale set equals the component
    /// set at the largest allocated level.
    pub equals_max_component: f64,
}

#[derive(Default)]
struct Tally {
    covered: usize,
    size: usize,
    n: usize,
    equal: usize,
    max_alpha: f64,
}

fn replicate(config: &DependenceConfig, synth: &SynthConfig, base: u64, r: u64) -> Result<Tally> {
    let data = generate_dataset(&SynthConfig { seed: derive_seed(base, "data", r), ..synth.clone() })?;
    let split = split_dataset(data.len(), config.split, derive_seed(base, "split", r))?;
    let fitted = fit_scales(&data, &split, config.scorer, &config.training)?;
    let plan = plan_for(config.allocation, &fitted, config.alpha)?;
    let widest = plan
        .alphas()
        .iter()
        .enumerate()
        .fold(0, |best, (i, &a)| if a > plan.alphas()[best] { i } else { best });
    let mut t = Tally { max_alpha: plan.max_alpha(), ..Tally::default() };
    for &i in &split.test {
        let sets = fitted
            .pvalues(&data.features[i])?
            .iter()
            .zip(plan.alphas())
            .enumerate()
            .map(|(s, (p, &a))| set_from_pvalues(MethodId::Scale(s + 1), &fitted.labels, p, a))
            .collect::<Vec<_>>();
        let multi = intersect_sets(&sets)?;
        t.covered += usize::from(multi.contains(data.labels[i]));
        t.size += multi.len();
        t.n += 1;
        t.equal += usize::from(multi.members() == sets[widest].members());
    }
    Ok(t)
}

/// Multi-scale coverage and size as the scale features move from
/// independent (`rho = 0`) to identical (`rho = 1`).
pub fn run_dependence_study(config: &DependenceConfig) -> Result<Vec<DependenceRow>> {
    config.validate()?;
    config
        .rho_grid
        .iter()
        .enumerate()
        .map(|(j, &rho)| {
            let synth = SynthConfig { rho, ..config.synth.clone() };
            let base = derive_seed(config.synth.seed, "rho", j as u64);
            let reps: Vec<Tally> = (0..config.replications as u64)
                .into_par_iter()
                .map(|r| replicate(config, &synth, base, r))
                .collect::<Result<_>>()?;
            let mut total = Tally::default();
            for t in &reps {
                total.covered += t.covered;
                total.size += t.size;
                total.n += t.n;
                total.equal += t.equal;
                total.max_alpha += t.max_alpha;
            }
            let coverage = total.covered as f64 / total.n as f64;
            Ok(DependenceRow {
                rho,
                coverage,
                mean_size: total.size as f64 / total.n as f64,
                se_coverage: binomial_se(coverage, total.n),
                n_evals: total.n,
                max_alpha: total.max_alpha / reps.len() as f64,
                equals_max_component: total.equal as f64 / total.n as f64,
            })
        })
        .collect()
}
