//! Quantitative evaluation of trained models.
//!
//! Four measurements cover the claims the laboratory cares about:
//!
//! - **task accuracy** — argmax label agreement;
//! - **concept ROC-AUC** — Mann–Whitney ranking quality of each concept
//!   probability against its annotation, ties counted half, concepts whose
//!   split carries a single class excluded from the mean;
//! - **entropy summary** — mean and quantiles of the Bernoulli entropies of
//!   the predicted concept probabilities, the signal the confidence gate
//!   runs on (in distribution they concentrate near 0, under shift they
//!   climb);
//! - **bottleneck shift** — how far a perturbation moves the bottleneck
//!   population: distance between clean and shifted centroids, normalized
//!   by the clean population's own spread. A scalar stand-in for eyeballing
//!   embedding scatter plots, chosen so models can be ordered by it.
//!
//! [`evaluate`] bundles all four over one split, optionally under
//! salt-and-pepper corruption, into an [`EvalReport`] with a fixed CSV
//! rendering.

use crate::datagen::{
    format_f64, inject_salt_pepper, ConceptDataset, DatagenError, Split,
};
use crate::models::{bernoulli_entropy, ForwardOptions, Model, ModelError};
use crate::training::argmax;
use crate::Array;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{split} split is empty")]
    EmptySplit { split: Split },
    #[error("score/label length mismatch: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("bottleneck width mismatch: {id} vs {ood}")]
    WidthMismatch { id: usize, ood: usize },
    #[error("bottleneck shift needs at least 2 rows per set, got {rows}")]
    TooFewRows { rows: usize },
    #[error("bottleneck shift is undefined: the reference set has zero spread")]
    ZeroSpread,
    #[error("data mismatch: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

/// Salt-and-pepper corruption applied to the evaluated inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Corruption level in `[0, 1]`.
    pub level: f64,
    pub seed: u64,
}

/// Mean and (5, 25, 50, 75, 95)-percentiles of an entropy population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub mean: f64,
    pub quantiles: [f64; 5],
}

/// One model evaluated on one split, optionally under shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_accuracy: f64,
    /// Mean over the concepts whose AUC is defined; absent when none is.
    pub mean_concept_auc: Option<f64>,
    /// Per-concept AUC; `None` where the split carries a single class.
    pub per_concept_auc: Vec<Option<f64>>,
    /// Concepts excluded from the mean for lack of both classes.
    pub auc_excluded: usize,
    pub entropy: EntropySummary,
    /// Centroid displacement of the bottlenecks under the requested shift;
    /// present only when a shift was supplied.
    pub bottleneck_shift: Option<f64>,
    pub sample_count: usize,
}

impl EvalReport {
    /// Column set of [`EvalReport::csv_row`], in order.
    pub const CSV_HEADER: &'static str = "task_accuracy,mean_concept_auc,auc_excluded,\
         mean_entropy,entropy_p5,entropy_p25,entropy_p50,entropy_p75,entropy_p95,\
         bottleneck_shift,sample_count";

    /// Fixed-order CSV rendering; absent fields stay empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
        let q = self.entropy.quantiles;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            format_f64(self.task_accuracy),
            opt(self.mean_concept_auc),
            self.auc_excluded,
            format_f64(self.entropy.mean),
            format_f64(q[0]),
            format_f64(q[1]),
            format_f64(q[2]),
            format_f64(q[3]),
            format_f64(q[4]),
            opt(self.bottleneck_shift),
            self.sample_count,
        )
    }
}

/// Mann–Whitney ROC-AUC of scores against binary labels: the probability
/// that a uniformly random positive outranks a uniformly random negative,
/// ties counted half (midranks). `Ok(None)` when the labels carry a single
/// class, which leaves the statistic undefined.
pub fn concept_roc_auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for &s in scores {
        if !s.is_finite() {
            return Err(MetricsError::Data(format!("score {s} is not finite")));
        }
    }
    for &l in labels {
        if l != 0.0 && l != 1.0 {
            return Err(MetricsError::Data(format!("label {l} is not binary")));
        }
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // 1-based midranks: tied scores share the average of their positions.
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1.0)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// How far a perturbation displaced a population of bottleneck vectors:
/// `‖μ_ood − μ_id‖₂` divided by the mean Euclidean distance of the `id`
/// rows to their own centroid. Zero exactly when the centroids coincide;
/// undefined (an error) when the reference set has no spread.
pub fn bottleneck_shift(id: &Array, ood: &Array) -> Result<f64, MetricsError> {
    let (id_rows, width) = (id.shape()[0], id.shape()[1]);
    let (ood_rows, ood_width) = (ood.shape()[0], ood.shape()[1]);
    if width != ood_width {
        return Err(MetricsError::WidthMismatch {
            id: width,
            ood: ood_width,
        });
    }
    let rows = id_rows.min(ood_rows);
    if rows < 2 {
        return Err(MetricsError::TooFewRows { rows });
    }

    let centroid = |m: &Array, n: usize| -> Vec<f64> {
        let mut mu = vec![0.0; width];
        for r in 0..n {
            for (j, m_j) in mu.iter_mut().enumerate() {
                *m_j += m.at(r, j);
            }
        }
        for m_j in mu.iter_mut() {
            *m_j /= n as f64;
        }
        mu
    };
    let mu_id = centroid(id, id_rows);
    let mu_ood = centroid(ood, ood_rows);

    let mut spread = 0.0;
    for r in 0..id_rows {
        let mut d2 = 0.0;
        for (j, &m_j) in mu_id.iter().enumerate() {
            let d = id.at(r, j) - m_j;
            d2 += d * d;
        }
        spread += d2.sqrt();
    }
    spread /= id_rows as f64;
    if spread == 0.0 {
        return Err(MetricsError::ZeroSpread);
    }

    let num: f64 = mu_id
        .iter()
        .zip(&mu_ood)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(num / spread)
}

/// Linear interpolation between order statistics: index `q/100 · (n−1)`
/// into the sorted values, fractional positions blended between neighbors.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Bernoulli entropies of a probability array: mean and the
/// (5, 25, 50, 75, 95)-percentiles by linear interpolation.
pub fn entropy_summary(p_hat: &Array) -> Result<EntropySummary, MetricsError> {
    if p_hat.numel() == 0 {
        return Err(MetricsError::Data("entropy summary of no entries".into()));
    }
    let mut entropies = Vec::with_capacity(p_hat.numel());
    for &p in p_hat.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::Data(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        entropies.push(bernoulli_entropy(p));
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
    entropies.sort_by(f64::total_cmp);
    let quantiles = [5.0, 25.0, 50.0, 75.0, 95.0].map(|q| percentile(&entropies, q));
    Ok(EntropySummary { mean, quantiles })
}

/// Evaluates a model on one split of a dataset: accuracy, per-concept
/// AUC, entropy statistics, all from a single forward pass. With a shift,
/// the metrics describe the corrupted inputs and `bottleneck_shift`
/// compares the clean and corrupted bottlenecks of the same rows.
pub fn evaluate(
    model: &Model,
    data: &ConceptDataset,
    split: Split,
    shift: Option<ShiftSpec>,
    opts: &ForwardOptions,
) -> Result<EvalReport, MetricsError> {
    let k = model.config.n_concepts;
    if data.width() != model.config.n_features {
        return Err(MetricsError::Data(format!(
            "dataset width {} does not match model n_features {}",
            data.width(),
            model.config.n_features
        )));
    }
    if data.spec.n_concepts_train != k {
        return Err(MetricsError::Data(format!(
            "dataset exposes {} concepts, model has {k}",
            data.spec.n_concepts_train
        )));
    }
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(MetricsError::EmptySplit { split });
    }
    let x_clean = data.x_rows(&idx);
    let c = data.c_rows(&idx);
    let y = data.y_rows(&idx);

    let x_eval = match shift {
        None => x_clean.clone(),
        Some(s) => inject_salt_pepper(&x_clean, s.level, &data.feature_stats, s.seed)?,
    };
    let out = model.forward(&x_eval, None, opts)?;

    let n = idx.len();
    let correct = y
        .iter()
        .enumerate()
        .filter(|&(r, &cls)| argmax(out.probs.row(r)) == cls)
        .count();
    let task_accuracy = correct as f64 / n as f64;

    let mut per_concept_auc = Vec::with_capacity(k);
    let mut auc_sum = 0.0;
    let mut auc_n = 0usize;
    for i in 0..k {
        let scores: Vec<f64> = (0..n).map(|r| out.concept_probs.at(r, i)).collect();
        let labels: Vec<f64> = (0..n).map(|r| c.at(r, i)).collect();
        let auc = concept_roc_auc(&scores, &labels)?;
        if let Some(a) = auc {
            auc_sum += a;
            auc_n += 1;
        }
        per_concept_auc.push(auc);
    }
    let mean_concept_auc = (auc_n > 0).then(|| auc_sum / auc_n as f64);

    let entropy = entropy_summary(&out.concept_probs)?;

    let bottleneck = match shift {
        None => None,
        Some(_) => {
            let clean = model.forward(&x_clean, None, opts)?;
            Some(bottleneck_shift(&clean.bottleneck, &out.bottleneck)?)
        }
    };

    Ok(EvalReport {
        task_accuracy,
        mean_concept_auc,
        per_concept_auc,
        auc_excluded: k - auc_n,
        entropy,
        bottleneck_shift: bottleneck,
        sample_count: n,
    })
}
