//! Model fitting: composite losses, SGD with momentum, and the epoch loop.
//!
//! Training optimizes a three-part objective assembled directly onto the
//! model's own value graph, so one backward sweep covers every path:
//!
//! - **task** — cross-entropy of the label probabilities;
//! - **bce** — per-concept binary cross-entropy of the concept
//!   probabilities against the (optionally class-weighted) annotations,
//!   scaled by `lambda_c`;
//! - **prior** — cross-entropy of the prior head fed the ground-truth
//!   concepts, scaled by `lambda_p` (models with a prior path only).
//!
//! Every logarithm carries the same tiny additive protection as the entropy
//! gate, so the loss is finite for any probabilities the graph can emit.
//! Stochastic regularizers are drawn from dedicated seed streams: each
//! optimizer step gets its own random-intervention mask (concepts overridden
//! with their annotations with probability `p_int`, affecting the mixture
//! only — the concept scores, their BCE targets and the confidence gate
//! always see the model's own predictions) and its own residual keep mask.
//! Two runs with the same config therefore produce bit-identical parameters.
//!
//! The loop shuffles per epoch, decays the learning rate on training-loss
//! plateaus, validates every `val_freq` epochs with the same Monte-Carlo
//! forward pass used at deployment, stops early once validation stalls for
//! `patience` checks, and restores the best validation checkpoint before
//! returning. Concept probabilities stay uncalibrated throughout — Platt
//! scaling is fitted strictly after training and its parameters are never
//! touched by the optimizer.

use crate::datagen::{format_f64, ConceptDataset, Split};
use crate::graph::{Bindings, GraphError, NodeId};
use crate::models::{
    ForwardOptions, Model, ModelError, ModelKind, INPUT_C_PRIOR, INPUT_DROP_MASK, INPUT_INT_MASK,
    INPUT_INT_VALUES, INPUT_USE_CAL, INPUT_X,
};
use crate::seeding::{fnv1a64, subseed, subseed_n};
use crate::tensor::TensorError;
use crate::{Array, ValueGraph};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Binding name of the one-hot label matrix `[B, L]`.
pub const INPUT_Y_ONEHOT: &str = "y_onehot";
/// Binding name of the concept annotations `[B, k]`.
pub const INPUT_C_TRUE: &str = "c_true";

/// Additive constant inside every loss logarithm; keeps the objective
/// finite at probabilities of exactly 0 without perturbing any other value
/// at f64 precision.
pub const LOSS_DELTA: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {field}: {detail}")]
    InvalidConfig { field: String, detail: String },
    #[error("data mismatch: {0}")]
    Data(String),
    #[error("lambda_p > 0 but {kind} has no prior head")]
    PriorUnsupported { kind: ModelKind },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the concept BCE term.
    pub lambda_c: f64,
    /// Weight of the prior cross-entropy term.
    pub lambda_p: f64,
    /// Per-entry probability of a training-time random intervention.
    pub p_int: f64,
    /// Per-entry residual dropout probability (models with dropout only).
    pub p_drop: f64,
    /// Learning rate.
    pub lr: f64,
    /// Momentum coefficient.
    pub momentum: f64,
    /// L2 weight decay folded into the gradient.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation checks tolerated before the
    /// run stops early.
    pub patience: usize,
    /// Validate every this many epochs.
    pub val_freq: usize,
    /// Multiplier applied to the learning rate on a training-loss plateau.
    pub lr_decay_factor: f64,
    /// Epochs without relative training-loss improvement that constitute a
    /// plateau.
    pub plateau_epochs: usize,
    /// Balance the concept BCE by inverse class frequency.
    pub class_weighted_bce: bool,
    /// Monte-Carlo samples of the deployment-matched validation pass.
    pub val_mc_samples: usize,
    /// Seed of every stochastic stream of the run.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_c: 1.0,
            lambda_p: 1.0,
            p_int: 0.25,
            p_drop: 0.5,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 4e-6,
            batch_size: 512,
            max_epochs: 150,
            patience: 5,
            val_freq: 5,
            lr_decay_factor: 0.1,
            plateau_epochs: 10,
            class_weighted_bce: true,
            val_mc_samples: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The default recipe adjusted to what a model family supports: models
    /// without a prior head drop the prior term, and the plain bottleneck
    /// models skip random interventions as well.
    pub fn for_kind(kind: ModelKind) -> Self {
        let mut cfg = TrainConfig::default();
        match kind {
            ModelKind::MixCem => {}
            ModelKind::Cem => cfg.lambda_p = 0.0,
            ModelKind::VanillaCbm | ModelKind::HybridCbm => {
                cfg.lambda_p = 0.0;
                cfg.p_int = 0.0;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |field: &str, detail: &str| {
            Err(TrainError::InvalidConfig {
                field: field.to_string(),
                detail: detail.to_string(),
            })
        };
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_p", self.lambda_p)] {
            if !(v.is_finite() && v >= 0.0) {
                return err(name, "must be finite and non-negative");
            }
        }
        for (name, v) in [("p_int", self.p_int), ("p_drop", self.p_drop)] {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return err(name, "must lie in [0, 1]");
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err("lr", "must be finite and positive");
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return err("momentum", "must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err("weight_decay", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive");
        }
        if self.patience == 0 {
            return err("patience", "must be positive");
        }
        if self.val_freq == 0 {
            return err("val_freq", "must be positive");
        }
        if !(self.lr_decay_factor.is_finite()
            && self.lr_decay_factor > 0.0
            && self.lr_decay_factor <= 1.0)
        {
            return err("lr_decay_factor", "must lie in (0, 1]");
        }
        if self.plateau_epochs == 0 {
            return err("plateau_epochs", "must be positive");
        }
        if self.val_mc_samples == 0 {
            return err("val_mc_samples", "must be positive");
        }
        Ok(())
    }
}

/// Per-concept weights of the positive and negative BCE terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BceWeights {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl BceWeights {
    /// Unit weights: the plain unweighted BCE.
    pub fn uniform(k: usize) -> Self {
        BceWeights {
            pos: vec![1.0; k],
            neg: vec![1.0; k],
        }
    }

    /// Inverse-frequency weights `1 / (2 f_i)` and `1 / (2 (1 - f_i))`,
    /// which put equal total mass on both classes of each concept. A
    /// degenerate concept (frequency 0 or 1) falls back to unit weights.
    pub fn balanced(frequencies: &[f64]) -> Self {
        let mut pos = Vec::with_capacity(frequencies.len());
        let mut neg = Vec::with_capacity(frequencies.len());
        for &f in frequencies {
            if f > 0.0 && f < 1.0 {
                pos.push(1.0 / (2.0 * f));
                neg.push(1.0 / (2.0 * (1.0 - f)));
            } else {
                pos.push(1.0);
                neg.push(1.0);
            }
        }
        BceWeights { pos, neg }
    }
}

/// Handles into the loss nodes appended to a model's graph.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub y_onehot: NodeId,
    pub c_true: NodeId,
    /// Task cross-entropy.
    pub task: NodeId,
    /// Concept binary cross-entropy (unscaled).
    pub bce: NodeId,
    /// Prior cross-entropy (unscaled); built only when `lambda_p > 0`.
    pub prior: Option<NodeId>,
    /// `task + lambda_c * bce + lambda_p * prior`.
    pub total: NodeId,
}

/// Appends the training objective to the model's graph and returns handles
/// to its nodes. Call once per model; the loss inputs stay unbound during
/// plain inference and cost nothing there.
pub fn build_loss(
    model: &mut Model,
    cfg: &TrainConfig,
    weights: &BceWeights,
) -> Result<LossGraph, TrainError> {
    cfg.validate()?;
    let k = model.config.n_concepts;
    let l = model.config.n_classes;
    if weights.pos.len() != k || weights.neg.len() != k {
        return Err(TrainError::Data(format!(
            "BCE weights cover {} concepts, model has {k}",
            weights.pos.len()
        )));
    }
    if cfg.lambda_p > 0.0 && model.mg.prior_probs.is_none() {
        return Err(TrainError::PriorUnsupported {
            kind: model.config.kind,
        });
    }
    let probs = model.mg.probs;
    let concept_probs = model.mg.concept_probs;
    let prior_probs = model.mg.prior_probs;
    let g = model.graph_mut();

    // Reuse the label/annotation inputs if a previous loss build (say, an
    // earlier training round) already registered them.
    let y_onehot = g
        .leaf(INPUT_Y_ONEHOT)
        .unwrap_or_else(|| g.input(INPUT_Y_ONEHOT));
    let c_true = g.leaf(INPUT_C_TRUE).unwrap_or_else(|| g.input(INPUT_C_TRUE));
    let delta_l = g.constant(Array::full(&[l], LOSS_DELTA));

    // Mean negative log-probability of the true class. The protection is
    // added before the one-hot pick, which lands it on exactly the picked
    // entry: sum_t (p_t + d) y_t = p_y + d.
    fn cross_entropy(g: &mut ValueGraph, probs: NodeId, y: NodeId, delta_l: NodeId) -> NodeId {
        let pd = g.add(probs, delta_l);
        let picked = g.mul(pd, y);
        let py = g.row_sum(picked);
        let lp = g.ln(py);
        let nl = g.neg(lp);
        g.mean(nl)
    }

    let task = cross_entropy(g, probs, y_onehot, delta_l);
    g.label(task, "loss_task");

    // Weighted concept BCE over every (row, concept) entry.
    let delta_k = g.constant(Array::full(&[k], LOSS_DELTA));
    let ones_k = g.constant(Array::ones(&[k]));
    let w_pos = g.constant(Array::from_raw(vec![k], weights.pos.clone()));
    let w_neg = g.constant(Array::from_raw(vec![k], weights.neg.clone()));
    let pd = g.add(concept_probs, delta_k);
    let ln_p = g.ln(pd);
    let neg_p = g.neg(concept_probs);
    let one_minus_p = g.add(neg_p, ones_k);
    let qd = g.add(one_minus_p, delta_k);
    let ln_q = g.ln(qd);
    let neg_c = g.neg(c_true);
    let one_minus_c = g.add(neg_c, ones_k);
    let pos_term = g.mul(c_true, ln_p);
    let pos_weighted = g.mul(pos_term, w_pos);
    let neg_term = g.mul(one_minus_c, ln_q);
    let neg_weighted = g.mul(neg_term, w_neg);
    let sum = g.add(pos_weighted, neg_weighted);
    let mean = g.mean(sum);
    let bce = g.neg(mean);
    g.label(bce, "loss_bce");

    let lam_c = g.constant(Array::from_raw(vec![1], vec![cfg.lambda_c]));
    let bce_term = g.mul(bce, lam_c);
    let mut total = g.add(task, bce_term);
    let prior = if cfg.lambda_p > 0.0 {
        let p = cross_entropy(g, prior_probs.expect("checked above"), y_onehot, delta_l);
        g.label(p, "loss_prior");
        let lam_p = g.constant(Array::from_raw(vec![1], vec![cfg.lambda_p]));
        let prior_term = g.mul(p, lam_p);
        total = g.add(total, prior_term);
        Some(p)
    } else {
        None
    };
    g.label(total, "loss_total");

    Ok(LossGraph {
        y_onehot,
        c_true,
        task,
        bce,
        prior,
        total,
    })
}

/// Stochastic gradient descent with momentum and coupled weight decay:
/// `d = g + wd * p`, `v = mu * v + d`, `p -= lr * v`. The Platt calibration
/// parameters are never updated — calibration owns them.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Vec<f64>>,
}

const FROZEN_PARAMS: [&str; 2] = ["platt_a", "platt_b"];

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdOptimizer {
            lr,
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    /// Applies one update from the given gradients.
    pub fn step(
        &mut self,
        graph: &mut ValueGraph,
        grads: &crate::graph::Gradients<f64>,
    ) -> Result<(), TrainError> {
        for (name, grad) in grads.iter() {
            if FROZEN_PARAMS.contains(&name) {
                continue;
            }
            let mut value = graph
                .param_value(name)
                .ok_or_else(|| TrainError::Data(format!("gradient for unknown parameter {name}")))?
                .clone();
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; value.numel()]);
            for ((p, g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *p;
                *vel = self.momentum * *vel + d;
                *p -= self.lr * *vel;
            }
            graph.set_param(name, value)?;
        }
        Ok(())
    }
}

/// One epoch's worth of diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Learning rate in force during the epoch.
    pub lr: f64,
    /// Sample-weighted epoch means of the loss and its components.
    pub total: f64,
    pub task: f64,
    pub bce: f64,
    pub prior: f64,
    /// Validation loss/accuracy, on epochs where validation ran.
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The loop ran through `max_epochs`.
    MaxEpochs,
    /// Validation failed to improve for `patience` consecutive checks.
    EarlyStopped,
}

/// The checkpoint restored into the model at the end of the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub val_loss: f64,
}

/// Full record of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Best validation checkpoint, when validation ran at least once.
    pub best: Option<BestCheckpoint>,
    /// Learning rate after the final epoch.
    pub final_lr: f64,
}

impl TrainHistory {
    /// Renders the per-epoch diagnostics as CSV with a fixed column set;
    /// epochs without a validation pass leave those fields empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,total,task,bce,prior,val_loss,val_acc\n");
        for r in &self.epochs {
            let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                format_f64(r.lr),
                format_f64(r.total),
                format_f64(r.task),
                format_f64(r.bce),
                format_f64(r.prior),
                opt(r.val_loss),
                opt(r.val_acc),
            ));
        }
        out
    }
}

/// Index of the row maximum, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct Validator<'a> {
    x: Array,
    c: Array,
    y: Vec<usize>,
    cfg: &'a TrainConfig,
    weights: &'a BceWeights,
    with_prior: bool,
}

impl<'a> Validator<'a> {
    /// Deployment-matched validation: Monte-Carlo forward under the
    /// training dropout rate, loss recomputed from the averaged outputs.
    fn run(&self, model: &Model) -> Result<(f64, f64), TrainError> {
        let opts = ForwardOptions {
            dropout_p: self.cfg.p_drop,
            mc_samples: self.cfg.val_mc_samples,
            rng_seed: subseed(self.cfg.seed, "val"),
            calibrated: false,
            keep_samples: false,
        };
        let out = model.forward(&self.x, None, &opts)?;
        let n = self.y.len();
        let k = model.config.n_concepts;

        let mut task = 0.0;
        let mut correct = 0usize;
        for (r, &cls) in self.y.iter().enumerate() {
            let row = out.probs.row(r);
            task -= (row[cls] + LOSS_DELTA).ln();
            if argmax(row) == cls {
                correct += 1;
            }
        }
        task /= n as f64;

        let mut bce = 0.0;
        for r in 0..n {
            for i in 0..k {
                let c = self.c.at(r, i);
                let p = out.concept_probs.at(r, i);
                bce -= self.weights.pos[i] * c * (p + LOSS_DELTA).ln()
                    + self.weights.neg[i] * (1.0 - c) * (1.0 - p + LOSS_DELTA).ln();
            }
        }
        bce /= (n * k) as f64;

        let mut prior = 0.0;
        if self.with_prior {
            let pp = model.prior_forward(&self.c)?;
            for (r, &cls) in self.y.iter().enumerate() {
                prior -= (pp.at(r, cls) + LOSS_DELTA).ln();
            }
            prior /= n as f64;
        }

        let loss = task + self.cfg.lambda_c * bce + self.cfg.lambda_p * prior;
        Ok((loss, correct as f64 / n as f64))
    }
}

fn one_hot(y: &[usize], classes: usize) -> Array {
    let mut a = Array::zeros(&[y.len(), classes]);
    for (r, &cls) in y.iter().enumerate() {
        a.set(r, cls, 1.0);
    }
    a
}

fn bernoulli_mask(rows: usize, cols: usize, p_one: f64, seed: u64) -> Array {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| if rng.gen_bool(p_one) { 1.0 } else { 0.0 })
        .collect();
    Array::from_raw(vec![rows, cols], data)
}

/// Trains `model` on the train split of `data`, validating on its val
/// split. Returns the history; the model ends at the best validation
/// checkpoint (or the final parameters if validation never ran) and gets a
/// fingerprint tying it to this config, model shape and task.
pub fn train(
    model: &mut Model,
    data: &ConceptDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    let k = model.config.n_concepts;
    let l = model.config.n_classes;
    if data.width() != model.config.n_features {
        return Err(TrainError::Data(format!(
            "dataset width {} does not match model n_features {}",
            data.width(),
            model.config.n_features
        )));
    }
    if data.spec.n_concepts_train != k {
        return Err(TrainError::Data(format!(
            "dataset exposes {} concepts, model has {k}",
            data.spec.n_concepts_train
        )));
    }
    if data.spec.n_classes != l {
        return Err(TrainError::Data(format!(
            "dataset has {} classes, model has {l}",
            data.spec.n_classes
        )));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let val_idx = data.indices(Split::Val);

    let weights = if cfg.class_weighted_bce {
        BceWeights::balanced(&data.concept_frequencies(Split::Train))
    } else {
        BceWeights::uniform(k)
    };
    let loss = build_loss(model, cfg, &weights)?;
    let has_dropout = model.mg.drop_mask.is_some();
    let with_prior = loss.prior.is_some();
    let mut opt = SgdOptimizer::new(cfg.lr, cfg.momentum, cfg.weight_decay);

    let validator = (!val_idx.is_empty()).then(|| Validator {
        x: data.x_rows(&val_idx),
        c: data.c_rows(&val_idx),
        y: data.y_rows(&val_idx),
        cfg,
        weights: &weights,
        with_prior,
    });

    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let mut best: Option<BestCheckpoint> = None;
    let mut best_params: Option<IndexMap<String, Array>> = None;
    let mut best_train = f64::INFINITY;
    let mut plateau = 0usize;
    let mut bad_checks = 0usize;
    let mut step: u64 = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr_used = opt.lr;
        let mut idx = train_idx.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(subseed_n(cfg.seed, "shuffle", epoch as u64));
        idx.shuffle(&mut rng);

        let mut sums = [0.0; 4]; // total, task, bce, prior
        let mut seen = 0usize;
        for (batch_no, batch) in idx.chunks(cfg.batch_size).enumerate() {
            let b_len = batch.len();
            let x = data.x_rows(batch);
            let c = data.c_rows(batch);
            let y = data.y_rows(batch);

            let mut b = Bindings::new();
            b.set(INPUT_X, x);
            b.set(INPUT_C_TRUE, c.clone());
            b.set(INPUT_Y_ONEHOT, one_hot(&y, l));
            b.set(INPUT_USE_CAL, Array::zeros(&[k]));
            if cfg.p_int > 0.0 {
                let mask =
                    bernoulli_mask(b_len, k, cfg.p_int, subseed_n(cfg.seed, "randint", step));
                b.set(INPUT_INT_MASK, mask);
                b.set(INPUT_INT_VALUES, c.clone());
            } else {
                b.set(INPUT_INT_MASK, Array::zeros(&[b_len, k]));
                b.set(INPUT_INT_VALUES, Array::zeros(&[b_len, k]));
            }
            if has_dropout {
                let keep = if cfg.p_drop > 0.0 {
                    model.draw_keep_mask(b_len, cfg.p_drop, subseed_n(cfg.seed, "dropout", step))
                } else {
                    Array::ones(&[b_len, k])
                };
                b.set(INPUT_DROP_MASK, keep);
            }
            if with_prior {
                b.set(INPUT_C_PRIOR, c);
            }

            let mut targets = vec![loss.total, loss.task, loss.bce];
            if let Some(p) = loss.prior {
                targets.push(p);
            }
            // The graph refuses to emit non-finite values, so a diverged
            // run surfaces here; report it with its position in the run.
            let eval = match model.mg.graph.evaluate_nodes(&b, &targets) {
                Ok(eval) => eval,
                Err(GraphError::NonFinite { .. }) => {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                    })
                }
                Err(e) => return Err(e.into()),
            };
            let components = [
                eval.scalar(loss.total),
                eval.scalar(loss.task),
                eval.scalar(loss.bce),
                loss.prior.map_or(0.0, |p| eval.scalar(p)),
            ];
            let grads = model.mg.graph.backward(&eval, loss.total)?;
            opt.step(model.graph_mut(), &grads)?;

            for (s, v) in sums.iter_mut().zip(components) {
                *s += v * b_len as f64;
            }
            seen += b_len;
            step += 1;
        }

        let inv = 1.0 / seen as f64;
        let [total, task, bce, prior] = sums.map(|s| s * inv);

        // Plateau detection against the best epoch loss seen so far.
        if total < best_train * (1.0 - 1e-4) {
            best_train = total;
            plateau = 0;
        } else {
            plateau += 1;
            if plateau >= cfg.plateau_epochs {
                opt.lr *= cfg.lr_decay_factor;
                plateau = 0;
            }
        }

        let mut record = EpochRecord {
            epoch,
            lr: lr_used,
            total,
            task,
            bce,
            prior,
            val_loss: None,
            val_acc: None,
        };
        if let Some(v) = &validator {
            if epoch % cfg.val_freq == 0 {
                let (val_loss, val_acc) = v.run(model)?;
                record.val_loss = Some(val_loss);
                record.val_acc = Some(val_acc);
                if best.is_none_or(|b| val_loss < b.val_loss) {
                    best = Some(BestCheckpoint { epoch, val_loss });
                    best_params = Some(model.params());
                    bad_checks = 0;
                } else {
                    bad_checks += 1;
                    if bad_checks >= cfg.patience {
                        stop = StopReason::EarlyStopped;
                        history.push(record);
                        break 'epochs;
                    }
                }
            }
        }
        history.push(record);
    }

    if let Some(params) = best_params {
        let g = model.graph_mut();
        for (name, value) in params {
            g.set_param(&name, value)?;
        }
    }

    let payload = serde_json::to_string(&(cfg, &model.config, &data.spec))
        .expect("configs serialize");
    model.fingerprint = Some(format!("{:016x}", fnv1a64(payload.as_bytes())));

    Ok(TrainHistory {
        epochs: history,
        stop,
        best,
        final_lr: opt.lr,
    })
}
