//! Per-scale predictive models and the scorers built from them.
//!
//! [`LogisticModel`] is multinomial (softmax) logistic regression trained by
//! full-batch gradient descent from zero weights on the mean cross-entropy
//! plus `l2 / 2 * ||W||^2` (bias unpenalised). Features are standardised
//! with training-split statistics, stored in the model and applied to every
//! later input.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformityScorer, Label};
use crate::error::{Error, Result};
use crate::synth::{conditional_with_edges, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.1,
            epochs: 2000,
            l2: 1e-4,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::config("l2", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    n_classes: usize,
    /// Length of the full input vector.
    input_dim: usize,
    feature_indices: Vec<usize>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Row-major `n_classes x feature_indices.len()`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LogisticModel {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_indices(&self) -> &[usize] {
        &self.feature_indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        self.feature_indices
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(&j, (mu, sd))| (x[j] - mu) / sd)
            .collect()
    }
}

/// Numerically stable softmax in place.
pub fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Penalised cross-entropy over a standardised design matrix. Parameters
/// are flattened as `[W (m x d, row-major), b (m)]`.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy<'a> {
    /// Row-major `n x d`.
    pub rows: &'a [f64],
    pub labels: &'a [Label],
    pub dim: usize,
    pub n_classes: usize,
    pub l2: f64,
}

impl CrossEntropy<'_> {
    pub fn n_params(&self) -> usize {
        self.n_classes * (self.dim + 1)
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        self.evaluate(params, None)
    }

    pub fn loss_and_gradient(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(params, Some(grad))
    }

    fn evaluate(&self, params: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let (m, d) = (self.n_classes, self.dim);
        let n = self.labels.len();
        let (w, b) = params.split_at(m * d);
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let mut probs = vec![0.0; m];
        let mut loss = 0.0;
        for (x, &y) in self.rows.chunks_exact(d.max(1)).take(n).zip(self.labels) {
            let x = &x[..d];
            for c in 0..m {
                probs[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            softmax(&mut probs);
            loss -= probs[y].max(f64::MIN_POSITIVE).ln();
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g.split_at_mut(m * d);
                for c in 0..m {
                    let r = probs[c] - f64::from(u8::from(c == y));
                    for (gj, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *gj += r * v;
                    }
                    gb[c] += r;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        let penalty = 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad {
            let (gw, gb) = g.split_at_mut(m * d);
            for (gj, wj) in gw.iter_mut().zip(w) {
                *gj = *gj * inv_n + self.l2 * wj;
            }
            for gc in gb.iter_mut() {
                *gc *= inv_n;
            }
        }
        loss * inv_n + penalty
    }
}

/// Training result with the loss before every update and after the last.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub model: LogisticModel,
    pub losses: Vec<f64>,
    /// Classes with no training example.
    pub missing_classes: Vec<Label>,
}

/// Fits a softmax model on the given feature columns.
pub fn train_logistic<X: AsRef<[f64]>>(
    train: &[(X, Label)],
    feature_indices: &[usize],
    n_classes: usize,
    config: &TrainingConfig,
) -> Result<LogisticModel> {
    train_logistic_traced(train, feature_indices, n_classes, config).map(|r| r.model)
}

pub fn train_logistic_traced<X: AsRef<[f64]>>(
    train: &[(X, Label)],
    feature_indices: &[usize],
    n_classes: usize,
    config: &TrainingConfig,
) -> Result<TrainingRun> {
    if train.is_empty() {
        return Err(Error::EmptyTraining);
    }
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::config("n_classes", "must be at least 2"));
    }
    if feature_indices.is_empty() {
        return Err(Error::config("feature_indices", "must select at least one feature"));
    }
    let input_dim = train[0].0.as_ref().len();
    for (x, y) in train {
        if x.as_ref().len() != input_dim {
            return Err(Error::ShapeError {
                expected: input_dim,
                got: x.as_ref().len(),
            });
        }
        if *y >= n_classes {
            return Err(Error::UnknownLabel(*y));
        }
    }
    if let Some(&bad) = feature_indices.iter().find(|&&j| j >= input_dim) {
        return Err(Error::ShapeError {
            expected: input_dim,
            got: bad + 1,
        });
    }

    let n = train.len();
    let d = feature_indices.len();
    let mut means = vec![0.0; d];
    let mut scales = vec![0.0; d];
    for (j, &col) in feature_indices.iter().enumerate() {
        let mean = train.iter().map(|(x, _)| x.as_ref()[col]).sum::<f64>() / n as f64;
        let var = train
            .iter()
            .map(|(x, _)| (x.as_ref()[col] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        means[j] = mean;
        scales[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut rows = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (x, y) in train {
        let x = x.as_ref();
        for (j, &col) in feature_indices.iter().enumerate() {
            rows.push((x[col] - means[j]) / scales[j]);
        }
        labels.push(*y);
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&y| seen[y] = true);
    let missing_classes: Vec<Label> = (0..n_classes).filter(|&c| !seen[c]).collect();

    let objective = CrossEntropy {
        rows: &rows,
        labels: &labels,
        dim: d,
        n_classes,
        l2: config.l2,
    };
    let mut params = vec![0.0; objective.n_params()];
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        losses.push(objective.loss_and_gradient(&params, &mut grad));
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
    }
    losses.push(objective.loss(&params));

    let bias = params.split_off(n_classes * d);
    Ok(TrainingRun {
        model: LogisticModel {
            n_classes,
            input_dim,
            feature_indices: feature_indices.to_vec(),
            means,
            scales,
            weights: params,
            bias,
        },
        losses,
        missing_classes,
    })
}

/// Softmax of the affine class scores on the model's feature columns.
pub fn predict_proba(model: &LogisticModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::ShapeError {
            expected: model.input_dim,
            got: x.len(),
        });
    }
    let z = model.standardize(x);
    let d = z.len();
    let mut logits: Vec<f64> = (0..model.n_classes)
        .map(|c| {
            model.bias[c]
                + model.weights[c * d..(c + 1) * d]
                    .iter()
                    .zip(&z)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
        })
        .collect();
    softmax(&mut logits);
    Ok(logits)
}

/// `A(x, y) = 1 - p_hat(y | x)`.
pub fn logistic_scorer(model: Arc<LogisticModel>, scale: usize) -> ConformityScorer {
    ConformityScorer::new(scale, move |x, y| match predict_proba(&model, x) {
        Ok(p) if y < p.len() => 1.0 - p[y],
        _ => f64::NAN,
    })
}

/// The true conditional `P(y | x)` of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    config: SynthConfig,
    edges: Vec<f64>,
}

impl OracleModel {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        Ok(OracleModel {
            config: config.clone(),
            edges: config.bin_edges(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn conditional(&self, x: &[f64]) -> Vec<f64> {
        conditional_with_edges(&self.config, &self.edges, x)
    }
}

/// `A(x, y) = -P(y | x)`.
pub fn oracle_scorer(oracle: Arc<OracleModel>, scale: usize) -> ConformityScorer {
    ConformityScorer::new(scale, move |x, y| {
        if x.len() != oracle.config.n_scales || y >= oracle.n_classes() {
            return f64::NAN;
        }
        -oracle.conditional(x)[y]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_epochs_is_uniform() {
        let data = vec![(vec![0.3, 1.0], 0), (vec![-1.0, 2.0], 2), (vec![0.5, 0.0], 1)];
        let config = TrainingConfig { epochs: 0, ..Default::default() };
        let model = train_logistic(&data, &[0, 1], 3, &config).unwrap();
        for x in [[0.0, 0.0], [10.0, -4.0]] {
            for p in predict_proba(&model, &x).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let mut data = Vec::new();
        for i in 0..20 {
            data.push((vec![-0.1 - i as f64 * 0.1], 0));
            data.push((vec![1.1 + i as f64 * 0.1], 1));
        }
        let config = TrainingConfig { epochs: 500, ..Default::default() };
        let model = train_logistic(&data, &[0], 2, &config).unwrap();
        let correct = data
            .iter()
            .filter(|(x, y)| {
                let p = predict_proba(&model, x).unwrap();
                usize::from(p[1] > p[0]) == *y
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn training_is_bit_identical() {
        let data: Vec<(Vec<f64>, Label)> =
            (0..50).map(|i| (vec![(i as f64 * 0.7).sin(), (i as f64).cos()], i % 3)).collect();
        let config = TrainingConfig { epochs: 100, ..Default::default() };
        let a = train_logistic(&data, &[0, 1], 3, &config).unwrap();
        let b = train_logistic(&data, &[0, 1], 3, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_errors() {
        let empty: Vec<(Vec<f64>, Label)> = vec![];
        let config = TrainingConfig::default();
        assert_eq!(train_logistic(&empty, &[0], 2, &config), Err(Error::EmptyTraining));
        let data = vec![(vec![0.0], 5)];
        assert_eq!(train_logistic(&data, &[0], 2, &config), Err(Error::UnknownLabel(5)));
        let data = vec![(vec![0.0], 0)];
        assert!(matches!(
            train_logistic(&data, &[1], 2, &config),
            Err(Error::ShapeError { .. })
        ));
    }

    #[test]
    fn missing_class_is_reported_not_fatal() {
        let data = vec![(vec![0.0], 0), (vec![1.0], 0)];
        let run = train_logistic_traced(&data, &[0], 3, &TrainingConfig { epochs: 10, ..Default::default() })
            .unwrap();
        assert_eq!(run.missing_classes, vec![1, 2]);
    }

    #[test]
    fn predict_checks_dimension() {
        let data = vec![(vec![0.0, 1.0], 0), (vec![1.0, 0.0], 1)];
        let model = train_logistic(&data, &[1], 2, &TrainingConfig { epochs: 5, ..Default::default() }).unwrap();
        assert_eq!(
            predict_proba(&model, &[1.0]),
            Err(Error::ShapeError { expected: 2, got: 1 })
        );
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut a = vec![0.3, -1.2, 2.0, 0.0];
        let mut b: Vec<f64> = a.iter().map(|v| v + 17.5).collect();
        softmax(&mut a);
        softmax(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logistic_scores() {
        let data: Vec<(Vec<f64>, Label)> =
            (0..40).map(|i| (vec![i as f64 / 10.0 - 2.0], usize::from(i >= 20) + usize::from(i >= 30))).collect();
        let model = Arc::new(
            train_logistic(&data, &[0], 3, &TrainingConfig { epochs: 200, ..Default::default() }).unwrap(),
        );
        let scorer = logistic_scorer(Arc::clone(&model), 1);
        for x in [-3.0, 0.0, 1.7] {
            let p = predict_proba(&model, &[x]).unwrap();
            let mut total = 0.0;
            for (y, py) in p.iter().enumerate() {
                let s = scorer.score(&[x], y).unwrap();
                assert!((0.0..=1.0).contains(&s));
                assert_eq!(s, 1.0 - py);
                total += s;
            }
            assert!((total - 2.0).abs() < 1e-12);
        }
        // out-of-range label surfaces as a NaN error, not a panic
        assert!(scorer.score(&[0.0], 7).is_err());
    }

    #[test]
    fn oracle_scores() {
        let uniform = SynthConfig { noise_sd: 1e9, ..SynthConfig::default() };
        let scorer = oracle_scorer(Arc::new(OracleModel::new(&uniform).unwrap()), 1);
        for y in 0..4 {
            assert!((scorer.score(&[0.1, 0.2, 0.3], y).unwrap() + 0.25).abs() < 1e-6);
        }
        let config = SynthConfig::default();
        let oracle = Arc::new(OracleModel::new(&config).unwrap());
        let scorer = oracle_scorer(Arc::clone(&oracle), 2);
        let x = [0.4, -0.2, 0.9];
        let p = oracle.conditional(&x);
        for a in 0..4 {
            for b in 0..4 {
                let (sa, sb) = (scorer.score(&x, a).unwrap(), scorer.score(&x, b).unwrap());
                if p[a] > p[b] {
                    assert!(sa < sb);
                }
            }
        }
        assert_eq!(scorer.score(&x, 1).unwrap(), scorer.score(&x, 1).unwrap());
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Label>, usize, usize, Vec<f64>) {
        let d = rng.random_range(1..=3);
        let m = rng.random_range(2..=4);
        let n = rng.random_range(1..=20);
        let rows = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
        let params = (0..m * (d + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        (rows, labels, d, m, params)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (rows, labels, d, m, params) = random_instance(&mut rng);
            let f = CrossEntropy { rows: &rows, labels: &labels, dim: d, n_classes: m, l2: 1e-2 };
            let mut grad = vec![0.0; params.len()];
            f.loss_and_gradient(&params, &mut grad);
            let h = 1e-5;
            for i in 0..params.len() {
                let mut up = params.clone();
                let mut down = params.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (f.loss(&up) - f.loss(&down)) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_non_increasing_for_small_steps(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let data: Vec<(Vec<f64>, Label)> = (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let y = usize::from(x[0] + 0.5 * x[1] + rng.random_range(-1.0..1.0) > 0.0)
                        + usize::from(x[1] > 1.0);
                    (x, y)
                })
                .collect();
            let config = TrainingConfig { epochs: 200, learning_rate: 0.1, l2: 1e-4 };
            let run = train_logistic_traced(&data, &[0, 1], 3, &config).unwrap();
            for w in run.losses.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }

        #[test]
        fn probabilities_are_normalised(x in prop::collection::vec(-50.0f64..50.0, 2)) {
            let data: Vec<(Vec<f64>, Label)> =
                (0..30).map(|i| (vec![i as f64 * 0.2, (i % 7) as f64], i % 4)).collect();
            let model = train_logistic(&data, &[0, 1], 4, &TrainingConfig { epochs: 50, ..Default::default() }).unwrap();
            let p = predict_proba(&model, &x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }
}
