//! Combining scales: set intersection and miscoverage allocation.
//!
//! With `K` scales and per-scale levels `alpha_1 + ... + alpha_K = alpha`,
//! the multi-scale set is the intersection of the per-scale sets. A union
//! bound over the per-scale miscoverage events keeps marginal coverage at
//! `1 - alpha`, and the intersection is never larger than any of its parts.
//!
//! The optimal allocator minimises the surrogate `sum_k ln f_k(alpha_k)`,
//! where `f_k` is the expected set size of scale `k` as a function of its
//! level. At an interior optimum every scale has the same elasticity
//! `psi_k = d/d(alpha) ln f_k`, so the solver bisects on that common value.

use serde::{Deserialize, Serialize};

use crate::conformal::{
    check_alpha, label_pvalues, set_from_pvalues, CalibrationScores, ConformityScorer,
    LabelSpace, MethodId, PValue, PredictionSet,
};
use crate::error::{Error, Result};
use crate::isotonic::project_non_increasing;

/// Tolerance on `sum_k alpha_k == total`.
pub const PLAN_SUM_TOLERANCE: f64 = 1e-12;

/// Sizes below this are clamped before taking logarithms.
pub const SIZE_FLOOR: f64 = 1e-6;

/// Number of points in [`default_grid`].
pub const DEFAULT_GRID_POINTS: usize = 25;

/// Resolution (units of `alpha`) of the fallback grid search.
const GRID_SEARCH_UNITS: usize = 2000;

/// Per-scale miscoverage levels summing to a total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    alphas: Vec<f64>,
    total: f64,
}

impl AllocationPlan {
    /// A plan whose total is the sum of `alphas`.
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        let total = alphas.iter().sum();
        Self::with_total(alphas, total)
    }

    /// A plan that must sum to `total` within [`PLAN_SUM_TOLERANCE`].
    pub fn with_total(alphas: Vec<f64>, total: f64) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::config("alphas", "plan needs at least one scale"));
        }
        check_alpha(total)?;
        for &a in &alphas {
            check_alpha(a)?;
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - total).abs() > PLAN_SUM_TOLERANCE {
            return Err(Error::config(
                "alphas",
                format!("levels sum to {sum}, expected {total}"),
            ));
        }
        Ok(AllocationPlan { alphas, total })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn max_alpha(&self) -> f64 {
        self.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Empirical expected set size `f_k(alpha)` on an increasing grid.
///
/// Between grid points `ln f` is interpolated linearly in `ln alpha`, which
/// reproduces power laws exactly and gives an elasticity `psi(alpha) = s_j /
/// alpha` on segment `j` with slope `s_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeCurve {
    scale: usize,
    grid: Vec<f64>,
    sizes: Vec<f64>,
}

impl SizeCurve {
    /// Validates a grid and a non-increasing size sequence.
    pub fn new(scale: usize, grid: Vec<f64>, sizes: Vec<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        if sizes.len() != grid.len() {
            return Err(Error::ShapeError {
                expected: grid.len(),
                got: sizes.len(),
            });
        }
        if grid.len() < 2 {
            return Err(Error::config("grid", "a size curve needs at least 2 points"));
        }
        if sizes.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::config("sizes", "sizes must be finite and non-negative"));
        }
        if sizes.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("sizes", "sizes must be non-increasing along the grid"));
        }
        Ok(SizeCurve { scale, grid, sizes })
    }

    /// Projects raw size estimates onto non-increasing sequences first.
    pub fn from_raw(scale: usize, grid: Vec<f64>, raw_sizes: &[f64]) -> Result<Self> {
        let mut sizes = project_non_increasing(raw_sizes);
        // PAVA means can drift by an ulp; re-impose the order exactly.
        for j in 1..sizes.len() {
            if sizes[j] > sizes[j - 1] {
                sizes[j] = sizes[j - 1];
            }
        }
        Self::new(scale, grid, sizes)
    }

    pub fn scale_id(&self) -> usize {
        self.scale
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    /// `[first grid point, last grid point]`.
    pub fn range(&self) -> (f64, f64) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    fn ln_size_at(&self, j: usize) -> f64 {
        self.sizes[j].max(SIZE_FLOOR).ln()
    }

    fn segment_slope(&self, j: usize) -> f64 {
        (self.ln_size_at(j + 1) - self.ln_size_at(j)) / (self.grid[j + 1].ln() - self.grid[j].ln())
    }

    /// Index of the segment containing `alpha`, clamped to the end segments.
    fn segment(&self, alpha: f64) -> usize {
        let j = self.grid.partition_point(|&g| g <= alpha);
        j.clamp(1, self.grid.len() - 1) - 1
    }

    /// Interpolated `ln f(alpha)`; linear extrapolation outside the grid.
    pub fn log_size(&self, alpha: f64) -> f64 {
        let j = self.segment(alpha);
        self.ln_size_at(j) + self.segment_slope(j) * (alpha.ln() - self.grid[j].ln())
    }

    /// Interpolated `f(alpha)`.
    pub fn size(&self, alpha: f64) -> f64 {
        self.log_size(alpha).exp()
    }

    /// Elasticity `psi(alpha) = d/d(alpha) ln f(alpha)` of the interpolant.
    pub fn elasticity(&self, alpha: f64) -> f64 {
        self.segment_slope(self.segment(alpha)) / alpha
    }

    /// Segments overlapping `[lo, hi]`, clipped, as `(start, end, slope)`.
    fn pieces(&self, lo: f64, hi: f64) -> Vec<(f64, f64, f64)> {
        (0..self.grid.len() - 1)
            .filter_map(|j| {
                let a0 = self.grid[j].max(lo);
                let a1 = self.grid[j + 1].min(hi);
                (a0 < a1).then(|| (a0, a1, self.segment_slope(j)))
            })
            .collect()
    }

    /// True when `psi` is strictly increasing on `[lo, hi]`: every slope
    /// negative and slopes non-decreasing from one segment to the next.
    fn elasticity_strictly_increasing(&self, lo: f64, hi: f64) -> bool {
        let pieces = self.pieces(lo, hi);
        // Equal slopes (power laws) differ by rounding only.
        pieces.iter().all(|p| p.2 < 0.0)
            && pieces
                .windows(2)
                .all(|w| w[0].2 <= w[1].2 + 1e-9 * w[0].2.abs().max(1.0))
    }

    /// `sup {alpha in [lo, hi] : psi(alpha) <= target}`, or `lo` if empty.
    /// Only meaningful when `psi` is non-decreasing.
    fn inverse_elasticity(&self, target: f64, lo: f64, hi: f64) -> f64 {
        let mut best = lo;
        for (a0, a1, s) in self.pieces(lo, hi) {
            if s / a0 > target {
                break;
            }
            best = if s / a1 <= target { a1 } else { (s / target).clamp(a0, a1) };
        }
        best
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    for (i, &a) in grid.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::config(
                "grid",
                format!("entry {i} ({a}) is outside (0, 1)"),
            ));
        }
        if i > 0 && a <= grid[i - 1] {
            return Err(Error::config(
                "grid",
                format!("entry {i} ({a}) is not greater than the previous entry"),
            ));
        }
    }
    Ok(())
}

/// `DEFAULT_GRID_POINTS` logarithmically spaced levels in
/// `[alpha / (10 K), min(0.5, 5 alpha)]`.
pub fn default_grid(alpha: f64, scales: usize) -> Vec<f64> {
    let lo = alpha / (10.0 * scales as f64);
    let hi = (5.0 * alpha).min(0.5);
    log_spaced(lo, hi, DEFAULT_GRID_POINTS)
}

pub(crate) fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| match i {
            0 => lo,
            i if i + 1 == n => hi,
            i => (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// Intersection of per-scale sets over a shared label space.
pub fn intersect_sets(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::IncompatibleSets("no sets to intersect".into()))?;
    if let Some(bad) = sets.iter().find(|s| s.label_space() != first.label_space()) {
        return Err(Error::IncompatibleSets(format!(
            "{} uses a different label space than {}",
            bad.method(),
            first.method()
        )));
    }
    let members = first
        .members()
        .iter()
        .copied()
        .filter(|&l| sets[1..].iter().all(|s| s.contains(l)))
        .collect();
    let alpha_used = sets.iter().map(PredictionSet::alpha_used).sum();
    Ok(PredictionSet::from_parts(
        MethodId::Multiscale,
        first.label_space().clone(),
        members,
        alpha_used,
    ))
}

/// `alpha / K` at every scale.
pub fn allocate_uniform(alpha: f64, scales: usize) -> Result<AllocationPlan> {
    check_alpha(alpha)?;
    if scales == 0 {
        return Err(Error::config("scales", "need at least one scale"));
    }
    let share = alpha / scales as f64;
    let mut alphas = vec![share; scales];
    // Absorb rounding so the plan sums to alpha.
    let rest: f64 = alphas[..scales - 1].iter().sum();
    alphas[scales - 1] = alpha - rest;
    AllocationPlan::with_total(alphas, alpha)
}

/// Mean prediction-set size at each grid level over `eval_points`, projected
/// to a non-increasing curve.
pub fn estimate_size_curve<X: AsRef<[f64]>>(
    scorer: &ConformityScorer,
    calib: &CalibrationScores,
    eval_points: &[X],
    labels: &LabelSpace,
    grid: &[f64],
) -> Result<SizeCurve> {
    if eval_points.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    validate_grid(grid)?;
    let mut totals = vec![0usize; grid.len()];
    for x in eval_points {
        let pvalues = label_pvalues(scorer, calib, x.as_ref(), labels)?;
        for (total, &a) in totals.iter_mut().zip(grid) {
            *total += pvalues.iter().filter(|p| p.value() > a).count();
        }
    }
    let n = eval_points.len() as f64;
    let raw: Vec<f64> = totals.iter().map(|&t| t as f64 / n).collect();
    SizeCurve::from_raw(scorer.scale_id(), grid.to_vec(), &raw)
}

/// `sum_k ln f_k(alpha_k)` on the curve interpolants.
pub fn surrogate_objective(curves: &[SizeCurve], alphas: &[f64]) -> f64 {
    curves
        .iter()
        .zip(alphas)
        .map(|(c, &a)| c.log_size(a))
        .sum()
}

/// How [`allocate_optimal_detailed`] reached its plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationSolver {
    /// Single scale, nothing to allocate.
    Trivial,
    /// Bisection on the common elasticity.
    Elasticity,
    /// Exhaustive search over a discretised simplex.
    GridSearch,
    /// The uniform split scored at least as well as the solver's plan.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalAllocation {
    pub plan: AllocationPlan,
    pub objective: f64,
    pub solver: AllocationSolver,
}

/// Plan minimising `sum_k ln f_k(alpha_k)` subject to `sum_k alpha_k =
/// alpha`, each `alpha_k` inside its curve's grid range.
pub fn allocate_optimal(curves: &[SizeCurve], alpha: f64) -> Result<AllocationPlan> {
    allocate_optimal_with_floor(curves, alpha, 0.0)
}

/// As [`allocate_optimal`], with every level additionally at least `floor`.
/// Pass `1 / (n + 1)` for a calibration split of size `n`: below that level
/// a scale can never exclude a label.
pub fn allocate_optimal_with_floor(
    curves: &[SizeCurve],
    alpha: f64,
    floor: f64,
) -> Result<AllocationPlan> {
    allocate_optimal_detailed(curves, alpha, floor).map(|a| a.plan)
}

pub fn allocate_optimal_detailed(
    curves: &[SizeCurve],
    alpha: f64,
    floor: f64,
) -> Result<OptimalAllocation> {
    check_alpha(alpha)?;
    if curves.is_empty() {
        return Err(Error::config("curves", "need at least one size curve"));
    }
    let bounds: Vec<(f64, f64)> = curves
        .iter()
        .map(|c| {
            let (lo, hi) = c.range();
            (lo.max(floor), hi)
        })
        .collect();
    let min_total: f64 = bounds.iter().map(|b| b.0).sum();
    let max_total: f64 = bounds.iter().map(|b| b.1).sum();
    if bounds.iter().any(|b| b.0 > b.1) || min_total > alpha || max_total < alpha {
        return Err(Error::InfeasibleAllocation {
            alpha,
            min: min_total,
            max: max_total,
        });
    }

    if curves.len() == 1 {
        let plan = AllocationPlan::with_total(vec![alpha], alpha)?;
        let objective = surrogate_objective(curves, plan.alphas());
        return Ok(OptimalAllocation {
            plan,
            objective,
            solver: AllocationSolver::Trivial,
        });
    }

    let strictly_monotone = curves
        .iter()
        .zip(&bounds)
        .all(|(c, &(lo, hi))| c.elasticity_strictly_increasing(lo, hi));
    let (mut alphas, solver) = if strictly_monotone {
        (solve_by_elasticity(curves, &bounds, alpha), AllocationSolver::Elasticity)
    } else {
        (solve_by_grid(curves, &bounds, alpha), AllocationSolver::GridSearch)
    };
    refine_pairwise(curves, &bounds, &mut alphas);
    absorb_residual(&mut alphas, &bounds, alpha);
    let mut best = (surrogate_objective(curves, &alphas), alphas, solver);

    let share = alpha / curves.len() as f64;
    if bounds.iter().all(|&(lo, hi)| lo <= share && share <= hi) {
        let uniform = allocate_uniform(alpha, curves.len())?;
        let objective = surrogate_objective(curves, uniform.alphas());
        if objective <= best.0 {
            best = (objective, uniform.alphas().to_vec(), AllocationSolver::Uniform);
        }
    }

    let (objective, alphas, solver) = best;
    Ok(OptimalAllocation {
        plan: AllocationPlan::with_total(alphas, alpha)?,
        objective,
        solver,
    })
}

/// Bisects on the common elasticity `t`; each level is the generalised
/// inverse of its `psi_k` at `t`, clamped to its bounds.
fn solve_by_elasticity(curves: &[SizeCurve], bounds: &[(f64, f64)], alpha: f64) -> Vec<f64> {
    let levels = |t: f64| -> Vec<f64> {
        curves
            .iter()
            .zip(bounds)
            .map(|(c, &(lo, hi))| c.inverse_elasticity(t, lo, hi))
            .collect()
    };
    let mut t_lo = curves
        .iter()
        .zip(bounds)
        .map(|(c, &(lo, _))| c.elasticity(lo))
        .fold(f64::INFINITY, f64::min);
    let mut t_hi = curves
        .iter()
        .zip(bounds)
        .map(|(c, &(_, hi))| c.elasticity(hi))
        .fold(f64::NEG_INFINITY, f64::max);
    // Step slightly outside so the end levels are attained.
    t_lo -= t_lo.abs() * 1e-9 + 1e-300;
    t_hi += t_hi.abs() * 1e-9;
    for _ in 0..400 {
        let mid = 0.5 * (t_lo + t_hi);
        if mid <= t_lo || mid >= t_hi {
            break;
        }
        if levels(mid).iter().sum::<f64>() < alpha {
            t_lo = mid;
        } else {
            t_hi = mid;
        }
    }
    let low = levels(t_lo);
    let high = levels(t_hi);
    let s_low: f64 = low.iter().sum();
    let s_high: f64 = high.iter().sum();
    // Interpolate across whatever jump remains so the plan sums to alpha.
    let w = if s_high > s_low {
        ((alpha - s_low) / (s_high - s_low)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut alphas: Vec<f64> = low
        .iter()
        .zip(&high)
        .map(|(a, b)| a + w * (b - a))
        .collect();
    absorb_residual(&mut alphas, bounds, alpha);
    alphas
}

/// Exact minimisation over levels on a lattice of step `alpha / 2000` by
/// dynamic programming over scales (the objective is separable). The
/// lattice point is then refined off the lattice by [`refine_pairwise`].
fn solve_by_grid(curves: &[SizeCurve], bounds: &[(f64, f64)], alpha: f64) -> Vec<f64> {
    let units = GRID_SEARCH_UNITS;
    let step = alpha / units as f64;
    let ranges: Vec<(usize, usize)> = bounds
        .iter()
        .map(|&(lo, hi)| {
            let i0 = ((lo / step) - 1e-9).ceil().max(1.0) as usize;
            let i1 = ((hi / step) + 1e-9).floor().min(units as f64) as usize;
            (i0, i1)
        })
        .collect();

    // best[j]: minimal cost of the scales so far using j units.
    let mut best = vec![f64::INFINITY; units + 1];
    best[0] = 0.0;
    let mut choice: Vec<Vec<usize>> = Vec::with_capacity(curves.len());
    for (curve, &(i0, i1)) in curves.iter().zip(&ranges) {
        let cost: Vec<f64> = (i0..=i1.max(i0))
            .map(|i| curve.log_size(i as f64 * step))
            .collect();
        let mut next = vec![f64::INFINITY; units + 1];
        let mut pick = vec![0usize; units + 1];
        for (j, prev) in best.iter().enumerate() {
            if !prev.is_finite() {
                continue;
            }
            for i in i0..=i1 {
                let total = j + i;
                if total > units {
                    break;
                }
                let v = prev + cost[i - i0];
                if v < next[total] {
                    next[total] = v;
                    pick[total] = i;
                }
            }
        }
        best = next;
        choice.push(pick);
    }

    let mut alphas = if best[units].is_finite() {
        let mut levels = vec![0.0; curves.len()];
        let mut j = units;
        for k in (0..curves.len()).rev() {
            let i = choice[k][j];
            levels[k] = i as f64 * step;
            j -= i;
        }
        levels
    } else {
        // Lattice too coarse for the bounds: share the slack by range width.
        let min_total: f64 = bounds.iter().map(|b| b.0).sum();
        let width: f64 = bounds.iter().map(|b| b.1 - b.0).sum();
        bounds
            .iter()
            .map(|&(lo, hi)| lo + (alpha - min_total) * (hi - lo) / width.max(f64::MIN_POSITIVE))
            .collect()
    };
    absorb_residual(&mut alphas, bounds, alpha);
    alphas
}

/// Exact minimisation over transfers between two levels with their sum held
/// fixed, repeated over all pairs until nothing improves. Between knots of
/// either curve the pair objective `s_i ln t + s_j ln(S - t)` is convex, so
/// each interval's minimum is its stationary point clipped to the interval.
/// For two scales one pass is the global optimum; for more it polishes the
/// lattice solution.
fn refine_pairwise(curves: &[SizeCurve], bounds: &[(f64, f64)], alphas: &mut [f64]) {
    let cost = |k: usize, a: f64| curves[k].log_size(a);
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..alphas.len() {
            for j in i + 1..alphas.len() {
                let total = alphas[i] + alphas[j];
                let lo = bounds[i].0.max(total - bounds[j].1);
                let hi = bounds[i].1.min(total - bounds[j].0);
                if lo >= hi {
                    continue;
                }
                let mut knots: Vec<f64> = curves[i]
                    .grid
                    .iter()
                    .copied()
                    .chain(curves[j].grid.iter().map(|g| total - g))
                    .filter(|&t| t > lo && t < hi)
                    .chain([lo, hi])
                    .collect();
                knots.sort_by(f64::total_cmp);
                knots.dedup();

                let current = cost(i, alphas[i]) + cost(j, alphas[j]);
                let mut best = (current, alphas[i]);
                for w in knots.windows(2) {
                    let (t0, t1) = (w[0], w[1]);
                    let mid = 0.5 * (t0 + t1);
                    let si = curves[i].segment_slope(curves[i].segment(mid));
                    let sj = curves[j].segment_slope(curves[j].segment(total - mid));
                    let slope = |t: f64| si / t - sj / (total - t);
                    let t = if slope(t0) >= 0.0 {
                        t0
                    } else if slope(t1) <= 0.0 {
                        t1
                    } else {
                        (si * total / (si + sj)).clamp(t0, t1)
                    };
                    let value = cost(i, t) + cost(j, total - t);
                    if value < best.0 {
                        best = (value, t);
                    }
                }
                if best.0 < current - 1e-13 {
                    alphas[i] = best.1;
                    alphas[j] = total - best.1;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Pushes `alpha - sum` onto the level with the most room in that direction.
fn absorb_residual(alphas: &mut [f64], bounds: &[(f64, f64)], alpha: f64) {
    for _ in 0..alphas.len() {
        let residual = alpha - alphas.iter().sum::<f64>();
        if residual == 0.0 {
            return;
        }
        let room = |k: usize| {
            if residual > 0.0 {
                bounds[k].1 - alphas[k]
            } else {
                alphas[k] - bounds[k].0
            }
        };
        let k = (0..alphas.len())
            .max_by(|&a, &b| room(a).total_cmp(&room(b)))
            .unwrap_or(0);
        let adjust = residual.clamp(-room(k).max(0.0), room(k).max(0.0));
        alphas[k] += if adjust == 0.0 { residual } else { adjust };
    }
}

/// Everything computed for one multi-scale prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleOutcome {
    /// p-values per scale, in label-space order.
    pub pvalues: Vec<Vec<PValue>>,
    pub per_scale: Vec<PredictionSet>,
    pub combined: PredictionSet,
}

/// Per-scale sets at the planned levels and their intersection.
pub fn multiscale_predict_detailed(
    scorers: &[ConformityScorer],
    calibs: &[CalibrationScores],
    plan: &AllocationPlan,
    x: &[f64],
    labels: &LabelSpace,
) -> Result<MultiscaleOutcome> {
    if scorers.len() != calibs.len() || scorers.len() != plan.len() {
        return Err(Error::IncompatibleSets(format!(
            "{} scorers, {} calibrations and {} levels",
            scorers.len(),
            calibs.len(),
            plan.len()
        )));
    }
    check_alpha(plan.total())?;
    let mut pvalues = Vec::with_capacity(scorers.len());
    let mut per_scale = Vec::with_capacity(scorers.len());
    for ((scorer, calib), &a) in scorers.iter().zip(calibs).zip(plan.alphas()) {
        check_alpha(a)?;
        let p = label_pvalues(scorer, calib, x, labels)?;
        per_scale.push(set_from_pvalues(MethodId::Scale(scorer.scale_id()), labels, &p, a));
        pvalues.push(p);
    }
    let combined = intersect_sets(&per_scale)?;
    Ok(MultiscaleOutcome {
        pvalues,
        per_scale,
        combined,
    })
}

/// Intersection of the per-scale prediction sets at the planned levels.
pub fn multiscale_predict(
    scorers: &[ConformityScorer],
    calibs: &[CalibrationScores],
    plan: &AllocationPlan,
    x: &[f64],
    labels: &LabelSpace,
) -> Result<PredictionSet> {
    multiscale_predict_detailed(scorers, calibs, plan, x, labels).map(|o| o.combined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{prediction_set, score_calibration};
    use proptest::prelude::*;

    fn set(members: &[usize], m: usize, alpha: f64) -> PredictionSet {
        let labels = LabelSpace::range(m).unwrap();
        let mask: Vec<bool> = (0..m).map(|l| members.contains(&l)).collect();
        PredictionSet::from_mask(MethodId::Scale(1), &labels, &mask, alpha)
    }

    fn power_curve(scale: usize, beta: f64) -> SizeCurve {
        let grid = log_spaced(1e-3, 0.5, 400);
        let sizes = grid.iter().map(|a: &f64| a.powf(-beta)).collect();
        SizeCurve::new(scale, grid, sizes).unwrap()
    }

    /// Brute force over alpha_1 on a 1e-4 lattice, K = 2.
    fn grid_search_two(curves: &[SizeCurve], alpha: f64) -> (f64, f64) {
        let (lo0, hi0) = curves[0].range();
        let (lo1, hi1) = curves[1].range();
        let mut best = (f64::INFINITY, 0.0);
        let steps = (alpha / 1e-4).round() as usize;
        for i in 1..steps {
            let a1 = i as f64 * 1e-4;
            let a2 = alpha - a1;
            if a1 < lo0 || a1 > hi0 || a2 < lo1 || a2 > hi1 {
                continue;
            }
            let v = curves[0].log_size(a1) + curves[1].log_size(a2);
            if v < best.0 {
                best = (v, a1);
            }
        }
        best
    }

    #[test]
    fn intersection_examples() {
        let a = set(&[0, 1, 2], 4, 0.05);
        let b = set(&[1, 2, 3], 4, 0.05);
        let c = intersect_sets(&[a.clone(), b]).unwrap();
        assert_eq!(c.members(), &[1, 2]);
        assert_eq!(c.method(), MethodId::Multiscale);
        assert!((c.alpha_used() - 0.1).abs() < 1e-15);

        let single = intersect_sets(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.members(), a.members());

        let disjoint = intersect_sets(&[set(&[0], 2, 0.1), set(&[1], 2, 0.1)]).unwrap();
        assert!(disjoint.is_empty());
    }

    #[test]
    fn intersection_rejects_mixed_label_spaces() {
        let r = intersect_sets(&[set(&[0], 2, 0.1), set(&[0], 3, 0.1)]);
        assert!(matches!(r, Err(Error::IncompatibleSets(_))));
        assert!(matches!(intersect_sets(&[]), Err(Error::IncompatibleSets(_))));
    }

    #[test]
    fn uniform_plans() {
        assert_eq!(allocate_uniform(0.1, 2).unwrap().alphas(), &[0.05, 0.05]);
        assert_eq!(allocate_uniform(0.1, 1).unwrap().alphas(), &[0.1]);
        let p = allocate_uniform(0.09, 3).unwrap();
        for &a in p.alphas() {
            assert!((a - 0.03).abs() < 1e-15);
        }
        assert!((p.alphas().iter().sum::<f64>() - 0.09).abs() <= PLAN_SUM_TOLERANCE);
        assert!(allocate_uniform(1.2, 2).is_err());
        assert!(allocate_uniform(0.1, 0).is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(AllocationPlan::with_total(vec![0.05, 0.05], 0.1).is_ok());
        assert!(AllocationPlan::with_total(vec![0.05, 0.06], 0.1).is_err());
        assert!(AllocationPlan::new(vec![0.0, 0.1]).is_err());
        assert!(AllocationPlan::new(vec![]).is_err());
    }

    #[test]
    fn default_grid_shape() {
        let g = default_grid(0.1, 3);
        assert_eq!(g.len(), 25);
        assert!((g[0] - 0.1 / 30.0).abs() < 1e-15);
        assert!((g[24] - 0.5).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*default_grid(0.02, 1).last().unwrap(), 0.1);
    }

    #[test]
    fn interpolant_is_exact_on_power_laws() {
        let c = power_curve(1, 2.0);
        for a in [0.0013, 0.01, 0.0667, 0.3] {
            assert!((c.log_size(a) - (-2.0 * f64::ln(a))).abs() < 1e-9);
            assert!((c.elasticity(a) + 2.0 / a).abs() < 1e-6 * (2.0 / a));
        }
    }

    #[test]
    fn power_law_allocation_matches_foc_and_grid_search() {
        let curves = [power_curve(1, 2.0), power_curve(2, 1.0)];
        let out = allocate_optimal_detailed(&curves, 0.1, 0.0).unwrap();
        assert_eq!(out.solver, AllocationSolver::Elasticity);
        let a = out.plan.alphas();
        assert!((a[0] - 0.0667).abs() <= 0.002, "{a:?}");
        assert!((a[1] - 0.0333).abs() <= 0.002, "{a:?}");
        assert!((a[0] + a[1] - 0.1).abs() <= PLAN_SUM_TOLERANCE);
        let (grid_best, _) = grid_search_two(&curves, 0.1);
        assert!(out.objective <= grid_best + 1e-12);
        assert!((out.objective - grid_best).abs() <= 1e-6);
    }

    #[test]
    fn exponential_floor_family_matches_grid_search() {
        let grid = log_spaced(2e-3, 0.2, 300);
        let make = |scale, a: f64, c: f64, b: f64| {
            let sizes = grid.iter().map(|&x| b + a * (-c * x).exp()).collect();
            SizeCurve::new(scale, grid.clone(), sizes).unwrap()
        };
        for &(c1, c2) in &[(40.0, 10.0), (10.0, 40.0), (25.0, 25.0), (60.0, 5.0)] {
            let curves = [make(1, 3.0, c1, 1.0), make(2, 3.0, c2, 0.5)];
            let out = allocate_optimal_detailed(&curves, 0.1, 0.0).unwrap();
            let (grid_best, _) = grid_search_two(&curves, 0.1);
            assert!(
                (out.objective - grid_best).abs() <= 1e-6,
                "c = ({c1}, {c2}): {} vs {grid_best} via {:?}",
                out.objective,
                out.solver
            );
        }
    }

    #[test]
    fn identical_curves_give_uniform_plan() {
        for k in [2, 3, 5] {
            let curves: Vec<SizeCurve> = (1..=k).map(|s| power_curve(s, 1.5)).collect();
            let plan = allocate_optimal(&curves, 0.1).unwrap();
            for &a in plan.alphas() {
                assert!((a - 0.1 / k as f64).abs() < 1e-10, "{:?}", plan.alphas());
            }
        }
    }

    #[test]
    fn single_curve_gets_everything() {
        let plan = allocate_optimal(&[power_curve(1, 1.0)], 0.1).unwrap();
        assert_eq!(plan.alphas(), &[0.1]);
    }

    #[test]
    fn flat_curves_fall_back_and_stay_uniform() {
        let grid = vec![0.01, 0.05, 0.2];
        let curves: Vec<SizeCurve> = (1..=2)
            .map(|s| SizeCurve::new(s, grid.clone(), vec![4.0, 4.0, 4.0]).unwrap())
            .collect();
        let out = allocate_optimal_detailed(&curves, 0.1, 0.0).unwrap();
        assert_eq!(out.solver, AllocationSolver::Uniform);
        assert_eq!(out.plan.alphas(), &[0.05, 0.05]);
    }

    #[test]
    fn infeasible_ranges() {
        let grid = vec![0.2, 0.3];
        let curves: Vec<SizeCurve> = (1..=2)
            .map(|s| SizeCurve::new(s, grid.clone(), vec![2.0, 1.0]).unwrap())
            .collect();
        assert!(matches!(
            allocate_optimal(&curves, 0.1),
            Err(Error::InfeasibleAllocation { .. })
        ));
        // the floor can also make a plan infeasible
        let curves = [power_curve(1, 1.0), power_curve(2, 1.0)];
        assert!(matches!(
            allocate_optimal_with_floor(&curves, 0.1, 0.06),
            Err(Error::InfeasibleAllocation { .. })
        ));
    }

    #[test]
    fn floor_is_respected() {
        let curves = [power_curve(1, 5.0), power_curve(2, 0.2)];
        let plan = allocate_optimal_with_floor(&curves, 0.1, 0.02).unwrap();
        assert!(plan.alphas().iter().all(|&a| a >= 0.02 - 1e-15));
        assert!((plan.alphas().iter().sum::<f64>() - 0.1).abs() <= PLAN_SUM_TOLERANCE);
    }

    #[test]
    fn constant_scorer_curve_is_full() {
        let scorer = ConformityScorer::new(1, |_, _| 0.3);
        let data: Vec<(Vec<f64>, usize)> = (0..20).map(|i| (vec![i as f64], i % 4)).collect();
        let calib = score_calibration(&scorer, &data).unwrap();
        let labels = LabelSpace::range(4).unwrap();
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let curve =
            estimate_size_curve(&scorer, &calib, &pts, &labels, &[0.05, 0.5, 0.9]).unwrap();
        assert_eq!(curve.sizes(), &[4.0, 4.0, 4.0]);
        let none: Vec<Vec<f64>> = vec![];
        assert_eq!(
            estimate_size_curve(&scorer, &calib, &none, &labels, &[0.1, 0.2]),
            Err(Error::EmptyEvaluation)
        );
    }

    #[test]
    fn size_curve_matches_direct_set_construction() {
        let scorer = ConformityScorer::new(1, |x, y| (x[0] - y as f64).abs());
        let data: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| (vec![(i as f64 * 0.731).sin() * 2.0 + 1.5], i % 4))
            .collect();
        let calib = score_calibration(&scorer, &data).unwrap();
        let labels = LabelSpace::range(4).unwrap();
        let pts: Vec<Vec<f64>> = (0..25).map(|i| vec![i as f64 * 0.15]).collect();
        let grid = [0.05, 0.1, 0.2, 0.4];
        let curve = estimate_size_curve(&scorer, &calib, &pts, &labels, &grid).unwrap();
        let direct: Vec<f64> = grid
            .iter()
            .map(|&a| {
                pts.iter()
                    .map(|x| prediction_set(&scorer, &calib, x, &labels, a).unwrap().len())
                    .sum::<usize>() as f64
                    / pts.len() as f64
            })
            .collect();
        // raw averages are already non-increasing, so projection is the identity
        assert_eq!(curve.sizes(), direct.as_slice());
    }

    #[test]
    fn multiscale_identical_scorers_equal_half_alpha_set() {
        let scorer = ConformityScorer::new(1, |x, y| (x[0] - y as f64).abs());
        let data: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|i| (vec![(i as f64 * 1.3).cos() * 1.5 + 1.0], i % 3))
            .collect();
        let c1 = score_calibration(&scorer, &data).unwrap();
        let s2 = scorer.with_scale(2);
        let c2 = score_calibration(&s2, &data).unwrap();
        let labels = LabelSpace::range(3).unwrap();
        let plan = allocate_uniform(0.2, 2).unwrap();
        for i in 0..20 {
            let x = [i as f64 * 0.12 - 0.2];
            let multi = multiscale_predict(
                &[scorer.clone(), s2.clone()],
                &[c1.clone(), c2.clone()],
                &plan,
                &x,
                &labels,
            )
            .unwrap();
            let single = prediction_set(&scorer, &c1, &x, &labels, 0.1).unwrap();
            assert_eq!(multi.members(), single.members());
        }
    }

    #[test]
    fn multiscale_single_scale_is_prediction_set() {
        let scorer = ConformityScorer::new(1, |x, y| (x[0] - y as f64).powi(2));
        let data: Vec<(Vec<f64>, usize)> =
            (0..25).map(|i| (vec![i as f64 / 8.0], i % 3)).collect();
        let c = score_calibration(&scorer, &data).unwrap();
        let labels = LabelSpace::range(3).unwrap();
        let plan = allocate_uniform(0.15, 1).unwrap();
        let x = [1.1];
        let multi = multiscale_predict(
            std::slice::from_ref(&scorer),
            std::slice::from_ref(&c),
            &plan,
            &x,
            &labels,
        )
        .unwrap();
        let single = prediction_set(&scorer, &c, &x, &labels, 0.15).unwrap();
        assert_eq!(multi.members(), single.members());
    }

    #[test]
    fn multiscale_length_mismatch() {
        let scorer = ConformityScorer::new(1, |_, _| 0.0);
        let c = CalibrationScores::new(1, vec![0.0]).unwrap();
        let plan = allocate_uniform(0.1, 2).unwrap();
        let labels = LabelSpace::range(2).unwrap();
        assert!(matches!(
            multiscale_predict(&[scorer], &[c], &plan, &[0.0], &labels),
            Err(Error::IncompatibleSets(_))
        ));
    }

    proptest! {
        #[test]
        fn intersection_is_subset_of_every_scale(
            cands in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..4),
            calib_scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..30), 4),
            alpha in 0.01f64..0.9,
        ) {
            let k = cands.len();
            let labels = LabelSpace::range(5).unwrap();
            let scorers: Vec<ConformityScorer> = cands
                .iter()
                .enumerate()
                .map(|(s, c)| {
                    let c = c.clone();
                    ConformityScorer::new(s + 1, move |_, y| c[y])
                })
                .collect();
            let calibs: Vec<CalibrationScores> = (0..k)
                .map(|s| CalibrationScores::new(s + 1, calib_scores[s].clone()).unwrap())
                .collect();
            let plan = allocate_uniform(alpha, k).unwrap();
            let out = multiscale_predict_detailed(&scorers, &calibs, &plan, &[0.0], &labels).unwrap();
            for s in &out.per_scale {
                prop_assert!(out.combined.is_subset_of(s));
                prop_assert!(out.combined.len() <= s.len());
            }
        }

        #[test]
        fn optimal_never_worse_than_uniform(
            betas in prop::collection::vec(0.2f64..4.0, 2..5),
            alpha in 0.02f64..0.3,
        ) {
            let curves: Vec<SizeCurve> = betas
                .iter()
                .enumerate()
                .map(|(s, &b)| power_curve(s + 1, b))
                .collect();
            let plan = allocate_optimal(&curves, alpha).unwrap();
            let uniform = allocate_uniform(alpha, curves.len()).unwrap();
            prop_assert!((plan.alphas().iter().sum::<f64>() - alpha).abs() <= PLAN_SUM_TOLERANCE);
            prop_assert!(
                surrogate_objective(&curves, plan.alphas())
                    <= surrogate_objective(&curves, uniform.alphas()) + 1e-9
            );
            // power laws: the optimum is proportional to the exponents
            let total: f64 = betas.iter().sum();
            for (a, b) in plan.alphas().iter().zip(&betas) {
                let expected = alpha * b / total;
                if expected > 1.001e-3 {
                    prop_assert!((a - expected).abs() < 1e-6, "{} vs {}", a, expected);
                }
            }
        }

        #[test]
        fn two_scale_plan_matches_fine_brute_force(
            drops in prop::collection::vec(prop::collection::vec(0.0f64..1.5, 7), 2),
            alpha in 0.05f64..0.3,
        ) {
            let grid = vec![0.005, 0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.5];
            let curves: Vec<SizeCurve> = drops
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let mut sizes = vec![4.0];
                    for step in d {
                        sizes.push((sizes.last().unwrap() - step).max(0.5));
                    }
                    SizeCurve::new(k + 1, grid.clone(), sizes).unwrap()
                })
                .collect();
            let out = allocate_optimal_detailed(&curves, alpha, 0.0).unwrap();
            let steps = 40_000;
            let mut best = f64::INFINITY;
            for i in 0..=steps {
                let a0 = alpha * i as f64 / steps as f64;
                if a0 >= 0.005 && alpha - a0 >= 0.005 {
                    best = best.min(surrogate_objective(&curves, &[a0, alpha - a0]));
                }
            }
            prop_assert!(out.objective <= best + 1e-9, "{:?}: {} vs {}", out.solver, out.objective, best);
        }
    }
}
