//! Single-scale conformal prediction over a finite label space.
//!
//! A [`ConformityScorer`] maps a feature vector and a candidate label to a
//! real score, where larger means *less* conforming. Scores of a held-out
//! calibration split form the reference distribution ([`CalibrationScores`]),
//! and a candidate label's p-value is
//!
//! ```text
//! p(y) = (#{i : A_i >= A(x, y)} + 1) / (n + 1)
//! ```
//!
//! Ties count toward inclusion. A label enters the prediction set at level
//! `alpha` when `p(y) > alpha`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class identifier. Synthetic data uses `0..m`.
pub type Label = usize;

/// An ordered finite set of at least two distinct labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    labels: Vec<Label>,
}

impl LabelSpace {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::config(
                "labels",
                format!("need at least 2 labels, got {}", labels.len()),
            ));
        }
        for (i, a) in labels.iter().enumerate() {
            if labels[..i].contains(a) {
                return Err(Error::config("labels", format!("duplicate label {a}")));
            }
        }
        Ok(LabelSpace { labels })
    }

    /// The label space `{0, 1, ..., m - 1}`.
    pub fn range(m: usize) -> Result<Self> {
        Self::new((0..m).collect())
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: Label) -> bool {
        self.labels.contains(&label)
    }

    pub fn position(&self, label: Label) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }
}

type ScoreFn = dyn Fn(&[f64], Label) -> f64 + Send + Sync;

/// A scale-specific conformity score `A(x, y)`; larger is less conforming.
#[derive(Clone)]
pub struct ConformityScorer {
    scale: usize,
    score_fn: Arc<ScoreFn>,
}

impl ConformityScorer {
    pub fn new<F>(scale: usize, score_fn: F) -> Self
    where
        F: Fn(&[f64], Label) -> f64 + Send + Sync + 'static,
    {
        ConformityScorer {
            scale,
            score_fn: Arc::new(score_fn),
        }
    }

    pub fn scale_id(&self) -> usize {
        self.scale
    }

    /// The same score function tagged with another scale.
    pub fn with_scale(&self, scale: usize) -> Self {
        ConformityScorer {
            scale,
            score_fn: Arc::clone(&self.score_fn),
        }
    }

    /// Evaluates the score. NaN is rejected because it has no place in the
    /// ordering the p-value relies on.
    pub fn score(&self, x: &[f64], label: Label) -> Result<f64> {
        let s = (self.score_fn)(x, label);
        if s.is_nan() {
            return Err(Error::NanScore {
                scale: self.scale,
                label,
            });
        }
        Ok(s)
    }
}

impl fmt::Debug for ConformityScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConformityScorer")
            .field("scale", &self.scale)
            .finish_non_exhaustive()
    }
}

/// Calibration scores for one scale, sorted non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScores {
    scale: usize,
    scores: Vec<f64>,
}

impl CalibrationScores {
    pub fn new(scale: usize, mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::config("scores", "calibration scores contain NaN"));
        }
        scores.sort_by(f64::total_cmp);
        Ok(CalibrationScores { scale, scores })
    }

    pub fn scale_id(&self) -> usize {
        self.scale
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `#{i : A_i >= score}` by binary search.
    pub fn count_at_least(&self, score: f64) -> usize {
        self.scores.len() - self.scores.partition_point(|&a| a < score)
    }

    /// `#{i : A_i > score}` by binary search.
    pub fn count_above(&self, score: f64) -> usize {
        self.scores.len() - self.scores.partition_point(|&a| a <= score)
    }
}

/// A conformal p-value in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PValue(f64);

impl PValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for PValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Which predictor produced a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    Scale(usize),
    Multiscale,
    /// The minimal set under the true conditional distribution.
    Oracle,
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodId::Scale(k) => write!(f, "scale_{k}"),
            MethodId::Multiscale => f.write_str("multiscale"),
            MethodId::Oracle => f.write_str("oracle"),
        }
    }
}

/// A subset of a label space for one test point. May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    method: MethodId,
    labels: LabelSpace,
    members: Vec<Label>,
    alpha_used: f64,
}

impl PredictionSet {
    /// Builds a set from membership flags aligned with `labels`.
    pub fn from_mask(method: MethodId, labels: &LabelSpace, mask: &[bool], alpha_used: f64) -> Self {
        debug_assert_eq!(mask.len(), labels.len());
        let members = labels
            .labels()
            .iter()
            .zip(mask)
            .filter(|(_, &keep)| keep)
            .map(|(&l, _)| l)
            .collect();
        PredictionSet {
            method,
            labels: labels.clone(),
            members,
            alpha_used,
        }
    }

    pub fn method(&self) -> MethodId {
        self.method
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.labels
    }

    /// Members in label-space order.
    pub fn members(&self) -> &[Label] {
        &self.members
    }

    pub fn alpha_used(&self) -> f64 {
        self.alpha_used
    }

    pub fn contains(&self, label: Label) -> bool {
        self.members.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.members.iter().all(|&l| other.contains(l))
    }

    pub(crate) fn from_parts(
        method: MethodId,
        labels: LabelSpace,
        members: Vec<Label>,
        alpha_used: f64,
    ) -> Self {
        PredictionSet {
            method,
            labels,
            members,
            alpha_used,
        }
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

/// Scores every calibration pair and sorts the result.
pub fn score_calibration<X: AsRef<[f64]>>(
    scorer: &ConformityScorer,
    calib: &[(X, Label)],
) -> Result<CalibrationScores> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let scores = calib
        .iter()
        .map(|(x, y)| scorer.score(x.as_ref(), *y))
        .collect::<Result<Vec<_>>>()?;
    CalibrationScores::new(scorer.scale_id(), scores)
}

/// `(#{i : A_i >= candidate} + 1) / (n + 1)`.
pub fn conformal_pvalue(calib: &CalibrationScores, candidate_score: f64) -> PValue {
    let n = calib.len();
    PValue((calib.count_at_least(candidate_score) + 1) as f64 / (n + 1) as f64)
}

/// Smoothed p-value `(#{A_i > s} + u (#{A_i = s} + 1)) / (n + 1)` with a
/// tie-break draw `u` in `[0, 1]`. At `u = 1` this is [`conformal_pvalue`].
/// Not used by the default pipeline.
pub fn smoothed_pvalue(calib: &CalibrationScores, candidate_score: f64, u: f64) -> PValue {
    let n = calib.len();
    let above = calib.count_above(candidate_score);
    let ties = calib.count_at_least(candidate_score) - above;
    PValue((above as f64 + u * (ties + 1) as f64) / (n + 1) as f64)
}

/// p-values for every label in `labels`, in label-space order.
pub fn label_pvalues(
    scorer: &ConformityScorer,
    calib: &CalibrationScores,
    x: &[f64],
    labels: &LabelSpace,
) -> Result<Vec<PValue>> {
    if scorer.scale_id() != calib.scale_id() {
        return Err(Error::IncompatibleSets(format!(
            "scorer scale {} does not match calibration scale {}",
            scorer.scale_id(),
            calib.scale_id()
        )));
    }
    labels
        .labels()
        .iter()
        .map(|&y| Ok(conformal_pvalue(calib, scorer.score(x, y)?)))
        .collect()
}

/// Thresholds precomputed p-values: keeps labels with `p > alpha`.
pub fn set_from_pvalues(
    method: MethodId,
    labels: &LabelSpace,
    pvalues: &[PValue],
    alpha: f64,
) -> PredictionSet {
    let mask: Vec<bool> = pvalues.iter().map(|p| p.value() > alpha).collect();
    PredictionSet::from_mask(method, labels, &mask, alpha)
}

/// `C(x) = {y : p(y) > alpha_k}` for one scale.
pub fn prediction_set(
    scorer: &ConformityScorer,
    calib: &CalibrationScores,
    x: &[f64],
    labels: &LabelSpace,
    alpha_k: f64,
) -> Result<PredictionSet> {
    check_alpha(alpha_k)?;
    let pvalues = label_pvalues(scorer, calib, x, labels)?;
    Ok(set_from_pvalues(
        MethodId::Scale(scorer.scale_id()),
        labels,
        &pvalues,
        alpha_k,
    ))
}

/// Full (transductive) conformal p-value. `fit` builds a scorer from the
/// training set augmented with the candidate pair; every training score and
/// the candidate's score are then taken from that scorer.
pub fn full_conformal_pvalue<F>(
    fit: F,
    train: &[(Vec<f64>, Label)],
    x_new: &[f64],
    y_candidate: Label,
) -> Result<PValue>
where
    F: Fn(&[(Vec<f64>, Label)]) -> ConformityScorer,
{
    if train.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut augmented = train.to_vec();
    augmented.push((x_new.to_vec(), y_candidate));
    let scorer = fit(&augmented);
    let candidate = scorer.score(x_new, y_candidate)?;
    let mut at_least = 0usize;
    for (x, y) in train {
        if scorer.score(x, *y)? >= candidate {
            at_least += 1;
        }
    }
    Ok(PValue((at_least + 1) as f64 / (train.len() + 1) as f64))
}

/// Transductive p-value for a scorer that does not depend on the data it is
/// evaluated against. Scores are recomputed over the whole training set for
/// each candidate.
pub fn transductive_pvalue(
    scorer: &ConformityScorer,
    train: &[(Vec<f64>, Label)],
    x_new: &[f64],
    y_candidate: Label,
) -> Result<PValue> {
    full_conformal_pvalue(|_| scorer.clone(), train, x_new, y_candidate)
}
