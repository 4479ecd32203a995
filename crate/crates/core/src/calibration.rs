//! Post-training concept-probability calibration and its quality metrics.
//!
//! Concept probabilities straight out of a trained model tend to be
//! overconfident, which matters here because the confidence gate feeds on
//! them. Per-concept Platt scaling fixes that after training: each concept
//! logit `z_i` gets an affine rescale `σ(a_i z_i + b_i)` whose two
//! parameters are fitted by maximum likelihood on the validation split with
//! every other weight frozen. Fitting runs full-batch gradient descent from
//! the identity `(a, b) = (1, 0)` — with only two parameters per concept
//! the full batch is trivial — and each concept fits independently.
//!
//! A positive fitted slope makes the rescale strictly monotone, so score
//! orderings (and with them ROC-AUC) are untouched; only the probability
//! values move. Calibration quality is measured by the expected calibration
//! error over equal-width probability bins.

use crate::datagen::{ConceptDataset, Split};
use crate::graph::{sigmoid, Bindings, GraphError};
use crate::models::{Model, ModelError, INPUT_X};
use crate::training::LOSS_DELTA;
use crate::Array;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bin count of every expected-calibration-error report in the pipeline.
pub const ECE_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid calibration config: {field}: {detail}")]
    InvalidConfig { field: String, detail: String },
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("probability/label length mismatch: {probs} vs {labels}")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("ECE needs at least one bin")]
    ZeroBins,
    #[error("data mismatch: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Hyperparameters of the calibration fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    /// Full-batch gradient-descent epochs; 0 keeps the identity.
    pub epochs: usize,
    /// Learning rate of the fit.
    pub lr: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            epochs: 30,
            lr: 0.01,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<(), CalibError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CalibError::InvalidConfig {
                field: "lr".into(),
                detail: "must be finite and positive".into(),
            });
        }
        Ok(())
    }
}

/// Per-concept affine calibration parameters; `(a, b) = (1, 0)` is the
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PlattParams {
    pub fn identity(k: usize) -> Self {
        PlattParams {
            a: vec![1.0; k],
            b: vec![0.0; k],
        }
    }
}

/// Outcome of one calibration fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub platt: PlattParams,
    /// Mean validation BCE before the first update and after each epoch.
    pub loss_curve: Vec<f64>,
    /// Per-concept expected calibration error of the raw probabilities.
    pub ece_raw: Vec<f64>,
    /// The same measurement after the fitted rescale.
    pub ece_calibrated: Vec<f64>,
}

/// The calibrated probability `σ(a·z + b)`; `(1, 0)` reproduces the plain
/// sigmoid bit for bit.
pub fn apply_platt(z: f64, a: f64, b: f64) -> f64 {
    sigmoid(z * a + b)
}

/// Fits per-concept Platt parameters to a logit matrix `z` and binary
/// targets `c` (both `[n, k]`) by full-batch gradient descent from the
/// identity. Returns the fit and the loss curve (`epochs + 1` entries,
/// starting at the identity loss).
pub fn fit_platt_logits(
    z: &Array,
    c: &Array,
    epochs: usize,
    lr: f64,
) -> Result<(PlattParams, Vec<f64>), CalibError> {
    if z.shape() != c.shape() {
        return Err(CalibError::Data(format!(
            "logit shape {:?} does not match target shape {:?}",
            z.shape(),
            c.shape()
        )));
    }
    if z.shape().len() != 2 || z.shape()[0] == 0 {
        return Err(CalibError::EmptyValidation);
    }
    let (n, k) = (z.shape()[0], z.shape()[1]);
    let mut platt = PlattParams::identity(k);
    let mut curve = Vec::with_capacity(epochs + 1);

    // One pass: mean BCE over every entry plus per-concept gradients of the
    // per-concept mean BCE — each concept is its own two-parameter MLE.
    let pass = |platt: &PlattParams| {
        let mut loss = 0.0;
        let mut ga = vec![0.0; k];
        let mut gb = vec![0.0; k];
        for r in 0..n {
            for i in 0..k {
                let p = apply_platt(z.at(r, i), platt.a[i], platt.b[i]);
                let t = c.at(r, i);
                loss -= t * (p + LOSS_DELTA).ln() + (1.0 - t) * (1.0 - p + LOSS_DELTA).ln();
                let resid = p - t;
                ga[i] += resid * z.at(r, i);
                gb[i] += resid;
            }
        }
        (loss / (n * k) as f64, ga, gb)
    };

    for _ in 0..epochs {
        let (loss, ga, gb) = pass(&platt);
        curve.push(loss);
        for i in 0..k {
            platt.a[i] -= lr * ga[i] / n as f64;
            platt.b[i] -= lr * gb[i] / n as f64;
        }
    }
    let (final_loss, _, _) = pass(&platt);
    curve.push(final_loss);
    Ok((platt, curve))
}

/// Calibrates a trained model on the validation split of `data`: recomputes
/// the concept logits with frozen weights, fits the Platt parameters, and
/// stores them in the model. Every non-Platt parameter is left untouched.
pub fn fit_platt(
    model: &mut Model,
    data: &ConceptDataset,
    cfg: &CalibConfig,
) -> Result<CalibrationReport, CalibError> {
    cfg.validate()?;
    let k = model.config.n_concepts;
    if data.width() != model.config.n_features {
        return Err(CalibError::Data(format!(
            "dataset width {} does not match model n_features {}",
            data.width(),
            model.config.n_features
        )));
    }
    if data.spec.n_concepts_train != k {
        return Err(CalibError::Data(format!(
            "dataset exposes {} concepts, model has {k}",
            data.spec.n_concepts_train
        )));
    }
    let val_idx = data.indices(Split::Val);
    if val_idx.is_empty() {
        return Err(CalibError::EmptyValidation);
    }

    // The concept scores depend only on the input — interventions, dropout
    // and the calibration switch all act downstream of them — so a single
    // deterministic evaluation of the logit node suffices.
    let mut b = Bindings::new();
    b.set(INPUT_X, data.x_rows(&val_idx));
    let logits_node = model.mg.concept_logits;
    let eval = model.mg.graph.evaluate_nodes(&b, &[logits_node])?;
    let z = eval.value(logits_node).clone();
    let c = data.c_rows(&val_idx);

    let (platt, loss_curve) = fit_platt_logits(&z, &c, cfg.epochs, cfg.lr)?;

    let n = val_idx.len();
    let mut ece_raw = Vec::with_capacity(k);
    let mut ece_calibrated = Vec::with_capacity(k);
    for i in 0..k {
        let labels: Vec<f64> = (0..n).map(|r| c.at(r, i)).collect();
        let raw: Vec<f64> = (0..n).map(|r| sigmoid(z.at(r, i))).collect();
        let cal: Vec<f64> = (0..n)
            .map(|r| apply_platt(z.at(r, i), platt.a[i], platt.b[i]))
            .collect();
        ece_raw.push(expected_calibration_error(&raw, &labels, ECE_BINS)?);
        ece_calibrated.push(expected_calibration_error(&cal, &labels, ECE_BINS)?);
    }

    let g = model.graph_mut();
    g.set_param("platt_a", Array::from_raw(vec![k], platt.a.clone()))?;
    g.set_param("platt_b", Array::from_raw(vec![k], platt.b.clone()))?;

    Ok(CalibrationReport {
        platt,
        loss_curve,
        ece_raw,
        ece_calibrated,
    })
}

/// Expected calibration error of binary-event probabilities over equal-width
/// bins: `Σ (n_b / N) · |accuracy_b − confidence_b|`, empty bins
/// contributing nothing. A probability of exactly 1 lands in the top bin.
pub fn expected_calibration_error(
    probs: &[f64],
    labels: &[f64],
    bins: usize,
) -> Result<f64, CalibError> {
    if bins == 0 {
        return Err(CalibError::ZeroBins);
    }
    if probs.len() != labels.len() {
        return Err(CalibError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(CalibError::Data(format!(
                "probability {p} outside [0, 1]"
            )));
        }
    }
    for &l in labels {
        if l != 0.0 && l != 1.0 {
            return Err(CalibError::Data(format!("label {l} is not binary")));
        }
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut sum_p = vec![0.0; bins];
    let mut sum_l = vec![0.0; bins];
    for (&p, &l) in probs.iter().zip(labels) {
        let idx = ((p * bins as f64) as usize).min(bins - 1);
        count[idx] += 1;
        sum_p[idx] += p;
        sum_l[idx] += l;
    }
    let n = probs.len() as f64;
    let mut ece = 0.0;
    for i in 0..bins {
        if count[i] == 0 {
            continue;
        }
        let weight = count[i] as f64 / n;
        let conf = sum_p[i] / count[i] as f64;
        let acc = sum_l[i] / count[i] as f64;
        ece += weight * (acc - conf).abs();
    }
    Ok(ece)
}
