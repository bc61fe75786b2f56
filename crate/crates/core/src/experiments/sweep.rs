use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{validate_alphas, validate_replications, AllocationStrategy, ScorerKind};
use super::pipeline::{fit_scales, plan_for};
use super::binomial_se;
use crate::conformal::{set_from_pvalues, MethodId, PredictionSet};
use crate::error::Result;
use crate::models::TrainingConfig;
use crate::multiscale::intersect_sets;
use crate::seeds::derive_seed;
use crate::synth::{generate_dataset, split_dataset, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub synth: SynthConfig,
    #[serde(flatten)]
    pub training: TrainingConfig,
    /// Total miscoverage levels to sweep.
    pub alphas: Vec<f64>,
    pub allocation: AllocationStrategy,
    pub scorer: ScorerKind,
    pub replications: usize,
    /// Train / calibration / test fractions.
    pub split: [f64; 3],
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            synth: SynthConfig::default(),
            training: TrainingConfig::default(),
            alphas: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            allocation: AllocationStrategy::Uniform,
            scorer: ScorerKind::Logistic,
            replications: 200,
            split: [0.4, 0.3, 0.3],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.training.validate()?;
        validate_alphas("alphas", &self.alphas)?;
        validate_replications(self.replications)?;
        split_dataset(self.synth.n_points, self.split, 0).map(|_| ())
    }
}

/// Rows of the sweep table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SweepMethod {
    /// Scale `k` alone at the full level `alpha`.
    Single(usize),
    /// Scale `k` at its allocated level `alpha_k`.
    Component(usize),
    Multiscale,
    /// Reference line `1 - alpha`.
    NominalTotal,
    /// Reference line `1 - alpha_k` (mean allocated level).
    NominalComponent(usize),
}

impl fmt::Display for SweepMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepMethod::Single(k) => write!(f, "scale_{k}"),
            SweepMethod::Component(k) => write!(f, "component_{k}"),
            SweepMethod::Multiscale => f.write_str("multiscale"),
            SweepMethod::NominalTotal => f.write_str("nominal_total"),
            SweepMethod::NominalComponent(k) => write!(f, "nominal_component_{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub method: SweepMethod,
    pub coverage: f64,
    /// `None` on reference rows.
    pub mean_size: Option<f64>,
    pub se_coverage: Option<f64>,
    pub n_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Mean allocated levels per alpha, averaged over replications.
    pub mean_plans: Vec<Vec<f64>>,
    pub replication_seeds: Vec<u64>,
    /// Points where the multi-scale set was not inside some component set.
    pub subset_violations: usize,
    /// (alpha, replication) pairs where the mean multi-scale size exceeded
    /// the smallest mean component size.
    pub size_domination_violations: usize,
    /// (alpha, replication) pairs where the mean multi-scale size exceeded
    /// the smallest mean single-scale size at the full level. Informational.
    pub single_scale_smaller: usize,
    /// Per-replication mean sizes: `[alpha][replication][method]` with
    /// methods ordered as single scales, then multiscale.
    pub replication_sizes: Vec<Vec<Vec<f64>>>,
}

impl SweepResult {
    pub fn row(&self, alpha: f64, method: SweepMethod) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.alpha == alpha && r.method == method)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    covered: usize,
    size: usize,
    n: usize,
}

impl Tally {
    fn add(&mut self, set: &PredictionSet, truth: usize) {
        self.covered += usize::from(set.contains(truth));
        self.size += set.len();
        self.n += 1;
    }

    fn merge(&mut self, other: &Tally) {
        self.covered += other.covered;
        self.size += other.size;
        self.n += other.n;
    }

    fn mean_size(&self) -> f64 {
        self.size as f64 / self.n as f64
    }
}

#[derive(Debug, Clone)]
struct AlphaTally {
    plan: Vec<f64>,
    single: Vec<Tally>,
    component: Vec<Tally>,
    multi: Tally,
    subset_violations: usize,
}

fn replicate(config: &SweepConfig, r: usize) -> Result<Vec<AlphaTally>> {
    let base = config.synth.seed;
    let synth = SynthConfig {
        seed: derive_seed(base, "data", r as u64),
        ..config.synth.clone()
    };
    let data = generate_dataset(&synth)?;
    let split = split_dataset(data.len(), config.split, derive_seed(base, "split", r as u64))?;
    let fitted = fit_scales(&data, &split, config.scorer, &config.training)?;
    let k = fitted.n_scales();
    let labels = &fitted.labels;

    let tests: Vec<(Vec<Vec<crate::conformal::PValue>>, usize)> = split
        .test
        .iter()
        .map(|&i| Ok((fitted.pvalues(&data.features[i])?, data.labels[i])))
        .collect::<Result<_>>()?;

    config
        .alphas
        .iter()
        .map(|&alpha| {
            let plan = plan_for(config.allocation, &fitted, alpha)?;
            let mut t = AlphaTally {
                plan: plan.alphas().to_vec(),
                single: vec![Tally::default(); k],
                component: vec![Tally::default(); k],
                multi: Tally::default(),
                subset_violations: 0,
            };
            for (pv, y) in &tests {
                let mut components = Vec::with_capacity(k);
                for (s, p) in pv.iter().enumerate() {
                    let method = MethodId::Scale(s + 1);
                    t.single[s].add(&set_from_pvalues(method, labels, p, alpha), *y);
                    let c = set_from_pvalues(method, labels, p, plan.alphas()[s]);
                    t.component[s].add(&c, *y);
                    components.push(c);
                }
                let multi = intersect_sets(&components)?;
                t.subset_violations += components.iter().filter(|c| !multi.is_subset_of(c)).count();
                t.multi.add(&multi, *y);
            }
            Ok(t)
        })
        .collect()
}

/// Fresh data, models and calibration per replication; every single scale
/// at `alpha`, every component at its allocated `alpha_k`, and their
/// intersection. Coverage and sizes are pooled over replications.
pub fn run_coverage_sweep(config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    let reps: Vec<Vec<AlphaTally>> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(config, r))
        .collect::<Result<_>>()?;

    let k = config.synth.n_scales;
    let mut rows = Vec::new();
    let mut mean_plans = Vec::new();
    let mut replication_sizes = Vec::new();
    let mut subset_violations = 0;
    let mut size_domination_violations = 0;
    let mut single_scale_smaller = 0;

    for (ai, &alpha) in config.alphas.iter().enumerate() {
        let mut single = vec![Tally::default(); k];
        let mut component = vec![Tally::default(); k];
        let mut multi = Tally::default();
        let mut plan_sum = vec![0.0; k];
        let mut sizes = Vec::with_capacity(reps.len());
        for rep in &reps {
            let t = &rep[ai];
            for s in 0..k {
                single[s].merge(&t.single[s]);
                component[s].merge(&t.component[s]);
                plan_sum[s] += t.plan[s];
            }
            multi.merge(&t.multi);
            subset_violations += t.subset_violations;
            let m = t.multi.mean_size();
            let min_component = t.component.iter().map(Tally::mean_size).fold(f64::INFINITY, f64::min);
            let min_single = t.single.iter().map(Tally::mean_size).fold(f64::INFINITY, f64::min);
            size_domination_violations += usize::from(m > min_component);
            single_scale_smaller += usize::from(m > min_single);
            sizes.push(t.single.iter().map(Tally::mean_size).chain([m]).collect());
        }
        replication_sizes.push(sizes);
        let plan: Vec<f64> = plan_sum.iter().map(|s| s / reps.len() as f64).collect();

        let row = |method, t: &Tally| {
            let coverage = t.covered as f64 / t.n as f64;
            SweepRow {
                alpha,
                method,
                coverage,
                mean_size: Some(t.mean_size()),
                se_coverage: Some(binomial_se(coverage, t.n)),
                n_evals: t.n,
            }
        };
        for (s, t) in single.iter().enumerate() {
            rows.push(row(SweepMethod::Single(s + 1), t));
        }
        for (s, t) in component.iter().enumerate() {
            rows.push(row(SweepMethod::Component(s + 1), t));
        }
        rows.push(row(SweepMethod::Multiscale, &multi));
        rows.push(SweepRow {
            alpha,
            method: SweepMethod::NominalTotal,
            coverage: 1.0 - alpha,
            mean_size: None,
            se_coverage: None,
            n_evals: 0,
        });
        for (s, a) in plan.iter().enumerate() {
            rows.push(SweepRow {
                alpha,
                method: SweepMethod::NominalComponent(s + 1),
                coverage: 1.0 - a,
                mean_size: None,
                se_coverage: None,
                n_evals: 0,
            });
        }
        mean_plans.push(plan);
    }

    Ok(SweepResult {
        rows,
        mean_plans,
        replication_seeds: (0..config.replications as u64)
            .map(|r| derive_seed(config.synth.seed, "data", r))
            .collect(),
        subset_violations,
        size_domination_violations,
        single_scale_smaller,
        replication_sizes,
    })
}
