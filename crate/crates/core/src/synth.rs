//! Synthetic multi-scale classification data.
//!
//! Scale 1 is a standard normal "coarse" feature. Every further scale mixes
//! it with fresh noise,
//!
//! ```text
//! X_k = rho * X_1 + sqrt(1 - rho^2) * e_k,    k >= 2
//! ```
//!
//! so `rho = 0` gives independent features and `rho = 1` identical ones. The
//! latent score is `z = sum_k w_k X_k + noise_sd * eta` and the label is the
//! bin of `z` among `m` equiprobable bins of its marginal `N(0, s^2)`. Given
//! the features, `z ~ N(sum_k w_k x_k, noise_sd^2)`, so the conditional label
//! distribution is a difference of normal CDFs at the bin edges.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conformal::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_points: usize,
    pub n_scales: usize,
    pub n_classes: usize,
    pub noise_sd: f64,
    /// Contribution of each scale's feature to the latent score.
    pub scale_weights: Vec<f64>,
    /// Shared-noise fraction across scale features, in `[0, 1]`.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_points: 1000,
            n_scales: 3,
            n_classes: 4,
            noise_sd: 0.1,
            scale_weights: vec![1.0, 0.6, 0.3],
            rho: 0.0,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 {
            return Err(Error::config("n_scales", "must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "must be at least 2"));
        }
        if self.n_points < self.n_scales + self.n_classes {
            return Err(Error::config(
                "n_points",
                format!(
                    "{} is below n_scales + n_classes = {}",
                    self.n_points,
                    self.n_scales + self.n_classes
                ),
            ));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::config("noise_sd", format!("{} is not a finite value >= 0", self.noise_sd)));
        }
        if self.scale_weights.len() != self.n_scales {
            return Err(Error::config(
                "scale_weights",
                format!("has {} entries for {} scales", self.scale_weights.len(), self.n_scales),
            ));
        }
        if self.scale_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("scale_weights", "entries must be finite"));
        }
        if self.scale_weights.iter().map(|w| w.abs()).sum::<f64>() <= 0.0 {
            return Err(Error::config("scale_weights", "at least one weight must be non-zero"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config("rho", format!("{} is outside [0, 1]", self.rho)));
        }
        Ok(())
    }

    /// Standard deviation of the latent score's marginal distribution.
    pub fn latent_sd(&self) -> f64 {
        let w = &self.scale_weights;
        let rho = self.rho;
        let cov = |j: usize, k: usize| -> f64 {
            match (j, k) {
                _ if j == k => 1.0,
                (0, _) | (_, 0) => rho,
                _ => rho * rho,
            }
        };
        let mut var = self.noise_sd * self.noise_sd;
        for j in 0..w.len() {
            for k in 0..w.len() {
                var += w[j] * w[k] * cov(j, k);
            }
        }
        var.sqrt()
    }

    /// The `m - 1` interior edges of the equiprobable latent bins.
    pub fn bin_edges(&self) -> Vec<f64> {
        let s = self.latent_sd();
        let std = Normal::standard();
        let m = self.n_classes;
        (1..m).map(|j| s * std.inverse_cdf(j as f64 / m as f64)).collect()
    }
}

/// Features (one column per scale) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    /// The generating config; `None` for imported data.
    pub config: Option<SynthConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_scales(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Largest label plus one.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// `(x, y)` pairs for the given rows.
    pub fn rows(&self, indices: &[usize]) -> Vec<(Vec<f64>, Label)> {
        indices
            .iter()
            .map(|&i| (self.features[i].clone(), self.labels[i]))
            .collect()
    }

    /// Writes `x1,...,xK,label` with 17 significant digits per float.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let k = self.n_scales();
        let header: Vec<String> = (1..=k).map(|j| format!("x{j}")).chain(["label".into()]).collect();
        writeln!(out, "{}", header.join(",")).expect("write to Vec");
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut fields: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
            fields.push(y.to_string());
            writeln!(out, "{}", fields.join(",")).expect("write to Vec");
        }
        crate::io::write_atomic(path, &out)
    }

    /// Reads a CSV written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            reason: "missing header".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let k = cols.len().saturating_sub(1);
        let expected: Vec<String> = (1..=k).map(|j| format!("x{j}")).chain(["label".into()]).collect();
        if k == 0 || cols != expected {
            return Err(Error::Parse {
                line: 1,
                reason: format!("expected header {}, got {header}", expected.join(",")),
            });
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != k + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("expected {} fields, got {}", k + 1, fields.len()),
                });
            }
            let x = fields[..k]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: line_no,
                            reason: format!("bad feature value {f:?}"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            let y = fields[k].parse::<Label>().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("bad label {:?}", fields[k]),
            })?;
            features.push(x);
            labels.push(y);
        }
        if labels.is_empty() {
            return Err(Error::Parse {
                line: 2,
                reason: "no data rows".into(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            config: None,
        })
    }
}

/// Disjoint train / calibration / test indices covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

fn draw_features(config: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let x1: f64 = rng.sample(StandardNormal);
    let mix = (1.0 - config.rho * config.rho).max(0.0).sqrt();
    let mut x = Vec::with_capacity(config.n_scales);
    x.push(x1);
    for _ in 1..config.n_scales {
        let e: f64 = rng.sample(StandardNormal);
        x.push(config.rho * x1 + mix * e);
    }
    x
}

fn latent_mean(config: &SynthConfig, x: &[f64]) -> f64 {
    config.scale_weights.iter().zip(x).map(|(w, v)| w * v).sum()
}

fn bin_of(edges: &[f64], z: f64) -> Label {
    edges.partition_point(|&e| e < z)
}

/// Draws a label for fixed features with fresh latent noise.
pub fn draw_label(config: &SynthConfig, edges: &[f64], x: &[f64], rng: &mut impl Rng) -> Label {
    let eta: f64 = rng.sample(StandardNormal);
    bin_of(edges, latent_mean(config, x) + config.noise_sd * eta)
}

/// Draws `n` feature vectors (no labels) from the config's feature model.
pub fn draw_feature_grid(config: &SynthConfig, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| draw_features(config, rng)).collect()
}

/// `config.n_points` i.i.d. rows, deterministic in `config.seed`.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let edges = config.bin_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut features = Vec::with_capacity(config.n_points);
    let mut labels = Vec::with_capacity(config.n_points);
    for _ in 0..config.n_points {
        let x = draw_features(config, &mut rng);
        labels.push(draw_label(config, &edges, &x, &mut rng));
        features.push(x);
    }
    Ok(Dataset {
        features,
        labels,
        config: Some(config.clone()),
    })
}

/// Seeded shuffle of `0..n` cut at the cumulative fractions.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::config("split", format!("fractions {fractions:?} must all be positive")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", format!("fractions sum to {total}, expected 1")));
    }
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_calib = (n as f64 * fractions[1]).round() as usize;
    if n_train == 0 || n_calib == 0 || n_train + n_calib >= n {
        return Err(Error::config(
            "split",
            format!("fractions {fractions:?} leave an empty part of {n} points"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let calib_end = n_train + n_calib;
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        calib: order[n_train..calib_end].to_vec(),
        test: order[calib_end..].to_vec(),
    })
}

/// `P(label = j | x)` for every class.
pub fn oracle_conditional(config: &SynthConfig, x: &[f64]) -> Vec<f64> {
    conditional_with_edges(config, &config.bin_edges(), x)
}

pub(crate) fn conditional_with_edges(config: &SynthConfig, edges: &[f64], x: &[f64]) -> Vec<f64> {
    let mu = latent_mean(config, x);
    let m = config.n_classes;
    if config.noise_sd == 0.0 {
        let mut p = vec![0.0; m];
        p[bin_of(edges, mu)] = 1.0;
        return p;
    }
    let std = Normal::standard();
    let cdf = |e: f64| std.cdf((e - mu) / config.noise_sd);
    let mut p = Vec::with_capacity(m);
    let mut prev = 0.0;
    for &e in edges {
        let c = cdf(e);
        p.push((c - prev).max(0.0));
        prev = c;
    }
    p.push((1.0 - prev).max(0.0));
    p
}
