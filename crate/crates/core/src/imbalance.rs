//! Per-category loss weights and the (weighted) cross-entropy and MAE losses.
//!
//! Four schemes map a category's share `r_m` of all nodes to a weight:
//!
//! | scheme       | `w_m`              | `dw/dr`   |
//! |--------------|--------------------|-----------|
//! | `no_weight`  | `1`                | `0`       |
//! | `proportion` | `1 - r_m`          | `-1`      |
//! | `log`        | `-ln(r_m + ε)`     | `-1/r`    |
//! | `reciprocal` | `1 / (r_m + ε)`    | `-1/r²`   |
//!
//! with `ε = 1e-7`, so a category that never occurs gets a large but finite
//! weight. Compensation strength grows down the table.
//!
//! The mean reduction divides by the summed weights of the true classes,
//! which makes the loss invariant to rescaling all weights by a constant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::CategoryStats;

pub const EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    NoWeight,
    Proportion,
    Log,
    Reciprocal,
}

impl WeightScheme {
    /// All schemes in increasing compensation strength.
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::NoWeight,
        WeightScheme::Proportion,
        WeightScheme::Log,
        WeightScheme::Reciprocal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightScheme::NoWeight => "no_weight",
            WeightScheme::Proportion => "proportion",
            WeightScheme::Log => "log",
            WeightScheme::Reciprocal => "reciprocal",
        }
    }

    /// Weight for a single proportion, before the non-negativity clamp.
    pub fn raw_weight(self, r: f64) -> f64 {
        match self {
            WeightScheme::NoWeight => 1.0,
            WeightScheme::Proportion => 1.0 - r,
            WeightScheme::Log => -(r + EPSILON).ln(),
            WeightScheme::Reciprocal => 1.0 / (r + EPSILON),
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown weight scheme {0:?}; expected one of no_weight, proportion, log, reciprocal")]
pub struct UnknownScheme(pub String);

impl FromStr for WeightScheme {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| UnknownScheme(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub scheme: WeightScheme,
    pub epsilon: f64,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn ones(num_categories: usize) -> Self {
        WeightVector {
            scheme: WeightScheme::NoWeight,
            epsilon: EPSILON,
            weights: vec![1.0; num_categories],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Weights for every category of `stats` under `scheme`.
///
/// A `log` weight can only go negative for a category holding every node
/// (`-ln(1 + ε)`); it is clamped to zero.
pub fn compute_weights(stats: &CategoryStats, scheme: WeightScheme) -> WeightVector {
    let weights = stats
        .proportions()
        .into_iter()
        .enumerate()
        .map(|(m, r)| {
            let w = scheme.raw_weight(r);
            if w < 0.0 {
                log::warn!("{scheme} weight for category {m} is {w:e}; clamping to 0");
                0.0
            } else {
                w
            }
        })
        .collect();
    WeightVector {
        scheme,
        epsilon: EPSILON,
        weights,
    }
}

/// Analytic `dw/dr` of each scheme (without ε).
pub fn weight_derivative(scheme: WeightScheme, r: f64) -> Result<f64, LossError> {
    if r.is_nan() || r <= 0.0 {
        return Err(LossError::DomainError(r));
    }
    Ok(match scheme {
        WeightScheme::NoWeight => 0.0,
        WeightScheme::Proportion => -1.0,
        WeightScheme::Log => -1.0 / r,
        WeightScheme::Reciprocal => -1.0 / (r * r),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite or invalid input: {0}")]
    NonFiniteInput(String),
    #[error("derivative undefined for r = {0}")]
    DomainError(f64),
}

/// A reduced loss with the per-sample terms it was reduced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub reduction: Reduction,
    pub contributions: Vec<f64>,
    /// Divisor of the mean reduction (`Σ_i W t_i`, or `N` for MAE); 1 for sum.
    pub normalizer: f64,
}

impl LossValue {
    fn reduce(contributions: Vec<f64>, reduction: Reduction, normalizer: f64) -> Self {
        let total: f64 = contributions.iter().sum();
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean if normalizer > 0.0 => total / normalizer,
            Reduction::Mean => 0.0,
        };
        LossValue {
            value,
            reduction,
            contributions,
            normalizer: match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => normalizer,
            },
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, weights: &[f64]) -> Result<(), LossError> {
    if labels.len() != rows {
        return Err(LossError::ShapeMismatch(format!(
            "{rows} rows but {} labels",
            labels.len()
        )));
    }
    if weights.len() != classes {
        return Err(LossError::ShapeMismatch(format!(
            "{classes} classes but {} weights",
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::ShapeMismatch(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(LossError::NonFiniteInput("weights must be finite and >= 0".into()));
    }
    Ok(())
}

/// Weighted cross-entropy over rows of class probabilities.
///
/// `l_i = -w_{y_i} ln p_i[y_i]`; the mean reduction divides by `Σ_i w_{y_i}`.
pub fn cross_entropy(
    probabilities: &[Vec<f64>],
    labels: &[usize],
    weights: &[f64],
    reduction: Reduction,
) -> Result<LossValue, LossError> {
    let classes = weights.len();
    if let Some(row) = probabilities.iter().find(|p| p.len() != classes) {
        return Err(LossError::ShapeMismatch(format!(
            "probability row of length {} for {classes} classes",
            row.len()
        )));
    }
    check_labels(labels, probabilities.len(), classes, weights)?;
    for p in probabilities {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::NonFiniteInput(format!(
                "row is not a probability vector (sum {sum})"
            )));
        }
    }
    let contributions = probabilities
        .iter()
        .zip(labels)
        .map(|(p, &y)| -weights[y] * p[y].ln())
        .collect();
    let normalizer = labels.iter().map(|&y| weights[y]).sum();
    Ok(LossValue::reduce(contributions, reduction, normalizer))
}

/// Weighted cross-entropy of `softmax(logits)` together with its gradient
/// with respect to the logits. `logits` is row-major with `weights.len()`
/// columns.
pub fn cross_entropy_with_logits(
    logits: &[f64],
    labels: &[usize],
    weights: &[f64],
    reduction: Reduction,
) -> Result<(LossValue, Vec<f64>), LossError> {
    let classes = weights.len();
    if classes == 0 || logits.len() % classes != 0 {
        return Err(LossError::ShapeMismatch(format!(
            "{} logits for {classes} classes",
            logits.len()
        )));
    }
    let rows = logits.len() / classes;
    check_labels(labels, rows, classes, weights)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteInput("logits".into()));
    }

    let normalizer: f64 = labels.iter().map(|&y| weights[y]).sum();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if normalizer > 0.0 => 1.0 / normalizer,
        Reduction::Mean => 0.0,
    };
    let mut contributions = Vec::with_capacity(rows);
    let mut grad = vec![0.0; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let g = &mut grad[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (gj, &x) in g.iter_mut().zip(row) {
            *gj = (x - max).exp();
            z += *gj;
        }
        let log_p = row[y] - max - z.ln();
        let w = weights[y];
        contributions.push(-w * log_p);
        let coef = w * scale;
        for gj in g.iter_mut() {
            *gj = coef * (*gj / z);
        }
        g[y] -= coef;
    }
    Ok((LossValue::reduce(contributions, reduction, normalizer), grad))
}

/// Row-wise softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean absolute error and its (sub)gradient with respect to `predictions`.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<(LossValue, Vec<f64>), LossError> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.iter().chain(targets).any(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteInput("mae inputs".into()));
    }
    let n = predictions.len() as f64;
    let contributions = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .collect();
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((LossValue::reduce(contributions, Reduction::Mean, n), grad))
}
