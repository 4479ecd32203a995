//! Concept-bottleneck model families.
//!
//! Four architectures share one backbone-plus-head skeleton and differ only
//! in how the concept bottleneck is built:
//!
//! - **Vanilla CBM** — the bottleneck is the vector of concept
//!   probabilities itself; interventions overwrite entries with exact 0/1
//!   values, so a fully intervened vanilla model ignores its input.
//! - **Hybrid CBM** — a vanilla bottleneck concatenated with an unaligned
//!   channel computed straight from the backbone. The channel bypasses the
//!   concept override, which is precisely how label-relevant information
//!   leaks around interventions.
//! - **CEM** — per-concept positive/negative embeddings from the input,
//!   scored by a shared linear scorer and mixed by the (possibly
//!   intervened) concept probability.
//! - **MixCEM** — CEM embeddings decomposed into a global, input-independent
//!   anchor plus an input-conditioned residual. The residual is gated by
//!   the model's own calibrated confidence (one minus the binary entropy of
//!   the concept probability) and dropped stochastically; at high
//!   uncertainty the bottleneck collapses onto the global anchors, whose
//!   predictions a separate prior head is trained to keep accurate.
//!
//! Every family is wired as a single value graph ([`ModelGraph`]) whose
//! parameters live in the graph and whose batch, intervention and dropout
//! inputs are bound at call time. [`Model::forward`] runs Monte-Carlo
//! inference (deterministic models collapse to one sample), and models
//! serialize to a self-describing JSON file that reproduces the graph
//! bit-for-bit.

mod wiring;

pub use wiring::{
    ModelGraph, INPUT_C_PRIOR, INPUT_DROP_MASK, INPUT_INT_MASK, INPUT_INT_VALUES, INPUT_USE_CAL,
    INPUT_X,
};

use crate::graph::{Bindings, GraphError, NodeId};
use crate::seeding::{subseed, subseed_n};
use crate::tensor::TensorError;
use crate::Array;
use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// File format tag written into every saved model.
pub const MODEL_FORMAT: &str = "cbmlab-model-v1";

/// Additive constant inside entropy logarithms; absorbed at any probability
/// a sigmoid can produce except exact 0/1, where it pins `H` to exactly 0.
pub const ENTROPY_DELTA: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {field}: {detail}")]
    InvalidConfig { field: String, detail: String },
    #[error("missing parameter {name}")]
    MissingParam { name: String },
    #[error("unexpected parameter {name}")]
    UnexpectedParam { name: String },
    #[error("parameter {name} has shape {got:?}, expected {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("bad forward input: {0}")]
    Input(String),
    #[error("{kind} has no prior head")]
    NoPriorPath { kind: ModelKind },
    #[error("model file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MixCem,
    VanillaCbm,
    HybridCbm,
    Cem,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::MixCem => write!(f, "mix_cem"),
            ModelKind::VanillaCbm => write!(f, "vanilla_cbm"),
            ModelKind::HybridCbm => write!(f, "hybrid_cbm"),
            ModelKind::Cem => write!(f, "cem"),
        }
    }
}

fn default_embed_dim() -> usize {
    1
}
fn default_leaky_slope() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// Architecture hyperparameters shared by all model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Input width the backbone consumes.
    pub n_features: usize,
    /// Number of supervised concepts.
    #[serde(rename = "k")]
    pub n_concepts: usize,
    /// Number of classes.
    #[serde(rename = "L")]
    pub n_classes: usize,
    /// Embedding width per concept side (embedding models).
    #[serde(rename = "m", default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Hidden widths of the leaky-ReLU backbone; empty means the backbone
    /// is the identity.
    #[serde(rename = "backbone_widths", default)]
    pub backbone: Vec<usize>,
    /// Unaligned bottleneck units (hybrid only).
    #[serde(rename = "k_prime", default)]
    pub n_unaligned: usize,
    /// Negative-side slope of every leaky rectifier; 1 makes them linear.
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Confidence gate on the residuals (MixCEM only). Off, the residuals
    /// pass ungated — the ablation that exposes what the gate buys.
    #[serde(default = "default_true")]
    pub entropy_gate: bool,
    /// Parameter initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |field: &str, detail: String| {
            Err(ModelError::InvalidConfig {
                field: field.to_string(),
                detail,
            })
        };
        if self.n_features == 0 {
            return err("n_features", "must be positive".into());
        }
        if self.n_concepts == 0 {
            return err("n_concepts", "must be positive".into());
        }
        if self.n_classes < 2 {
            return err("n_classes", "must be at least 2".into());
        }
        if self.embed_dim == 0 {
            return err("embed_dim", "must be positive".into());
        }
        if self.backbone.iter().any(|&w| w == 0) {
            return err("backbone", "hidden widths must be positive".into());
        }
        if self.n_unaligned > 0 && self.kind != ModelKind::HybridCbm {
            return err(
                "n_unaligned",
                format!("only the hybrid model takes unaligned units, not {}", self.kind),
            );
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope > 0.0 && self.leaky_slope <= 1.0) {
            return err("leaky_slope", "must lie in (0, 1]".into());
        }
        if !self.entropy_gate && self.kind != ModelKind::MixCem {
            return err(
                "entropy_gate",
                format!("only mix_cem has a gate to ablate, not {}", self.kind),
            );
        }
        Ok(())
    }

    /// Output width of the backbone.
    pub fn backbone_dim(&self) -> usize {
        self.backbone.last().copied().unwrap_or(self.n_features)
    }

    /// Width of the representation fed to the label head.
    pub fn bottleneck_dim(&self) -> usize {
        match self.kind {
            ModelKind::MixCem | ModelKind::Cem => self.n_concepts * self.embed_dim,
            ModelKind::VanillaCbm => self.n_concepts,
            ModelKind::HybridCbm => self.n_concepts + self.n_unaligned,
        }
    }
}

enum Init {
    /// `N(0, 1/fan_in)` entries.
    Normal { fan_in: usize },
    Zeros,
    Ones,
}

/// Canonical parameter table: names, shapes and initializers, in the fixed
/// order shared by initialization, wiring, extraction and optimization.
fn param_table(config: &ModelConfig) -> IndexMap<String, (Vec<usize>, Init)> {
    let mut table: IndexMap<String, (Vec<usize>, Init)> = IndexMap::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        table.insert(name, (shape, init));
    };
    let mut fan_in = config.n_features;
    for (i, &width) in config.backbone.iter().enumerate() {
        push(
            format!("backbone/{i}/w"),
            vec![fan_in, width],
            Init::Normal { fan_in },
        );
        push(format!("backbone/{i}/b"), vec![width], Init::Zeros);
        fan_in = width;
    }
    let h = config.backbone_dim();
    let k = config.n_concepts;
    let m = config.embed_dim;
    match config.kind {
        ModelKind::MixCem => {
            push("concepts/pos_embed".into(), vec![k * m], Init::Normal { fan_in: 1 });
            push("concepts/neg_embed".into(), vec![k * m], Init::Normal { fan_in: 1 });
            for side in ["pos", "neg"] {
                push(
                    format!("concepts/{side}_residual/w"),
                    vec![h, k * m],
                    Init::Normal { fan_in: h },
                );
                push(format!("concepts/{side}_residual/b"), vec![k * m], Init::Zeros);
            }
            push("scorer/w".into(), vec![2 * m], Init::Normal { fan_in: 2 * m });
        }
        ModelKind::VanillaCbm => {
            push("concepts/w".into(), vec![h, k], Init::Normal { fan_in: h });
            push("concepts/b".into(), vec![k], Init::Zeros);
        }
        ModelKind::HybridCbm => {
            push("concepts/w".into(), vec![h, k], Init::Normal { fan_in: h });
            push("concepts/b".into(), vec![k], Init::Zeros);
            if config.n_unaligned > 0 {
                push(
                    "unaligned/w".into(),
                    vec![h, config.n_unaligned],
                    Init::Normal { fan_in: h },
                );
                push("unaligned/b".into(), vec![config.n_unaligned], Init::Zeros);
            }
        }
        ModelKind::Cem => {
            for side in ["pos", "neg"] {
                push(
                    format!("concepts/{side}_proj/w"),
                    vec![h, k * m],
                    Init::Normal { fan_in: h },
                );
                push(format!("concepts/{side}_proj/b"), vec![k * m], Init::Zeros);
            }
            push("scorer/w".into(), vec![2 * m], Init::Normal { fan_in: 2 * m });
        }
    }
    let d = config.bottleneck_dim();
    push("head/w".into(), vec![d, config.n_classes], Init::Normal { fan_in: d });
    push("head/b".into(), vec![config.n_classes], Init::Zeros);
    // Per-concept Platt scaling, identity until calibration fits it.
    push("platt_a".into(), vec![k], Init::Ones);
    push("platt_b".into(), vec![k], Init::Zeros);
    table
}

/// Draws the initial parameter set from `config.seed`. Each parameter gets
/// its own counter stream keyed by name, so adding or removing one
/// parameter never shifts the draws of another.
pub fn init_params(config: &ModelConfig) -> Result<IndexMap<String, Array>, ModelError> {
    config.validate()?;
    let mut params = IndexMap::new();
    for (name, (shape, init)) in param_table(config) {
        let numel: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => Array::zeros(&shape),
            Init::Ones => Array::ones(&shape),
            Init::Normal { fan_in } => {
                let scale = 1.0 / (fan_in as f64).sqrt();
                let mut rng =
                    ChaCha12Rng::seed_from_u64(subseed(config.seed, &format!("init/{name}")));
                let data = (0..numel)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                Array::from_raw(shape, data)
            }
        };
        params.insert(name, value);
    }
    Ok(params)
}

fn validate_params(
    config: &ModelConfig,
    params: &IndexMap<String, Array>,
) -> Result<(), ModelError> {
    let table = param_table(config);
    for (name, (shape, _)) in &table {
        match params.get(name) {
            None => return Err(ModelError::MissingParam { name: name.clone() }),
            Some(v) if v.shape() != shape.as_slice() => {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    got: v.shape().to_vec(),
                    want: shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    for name in params.keys() {
        if !table.contains_key(name) {
            return Err(ModelError::UnexpectedParam { name: name.clone() });
        }
    }
    Ok(())
}

/// Options for Monte-Carlo inference.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Residual dropout probability at inference (MixCEM only; zero makes
    /// the pass deterministic and collapses it to a single sample).
    pub dropout_p: f64,
    /// Dropout samples to average (models without dropout always use 1).
    pub mc_samples: usize,
    /// Seed of the dropout-mask streams.
    pub rng_seed: u64,
    /// Use the Platt-calibrated concept probabilities; off, the raw
    /// sigmoid of the scores drives probabilities, gate and mixture alike.
    pub calibrated: bool,
    /// Also return the bottleneck of every Monte-Carlo sample.
    pub keep_samples: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            dropout_p: 0.5,
            mc_samples: 50,
            rng_seed: 0,
            calibrated: true,
            keep_samples: false,
        }
    }
}

/// Forward pass results. `probs` and `bottleneck` are averaged over the
/// Monte-Carlo samples; the concept quantities come from the deterministic
/// score path and are sample-independent.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Task probabilities `[B, L]`.
    pub probs: Array,
    /// Raw concept scores `[B, k]`.
    pub concept_logits: Array,
    /// Concept probabilities `[B, k]`.
    pub concept_probs: Array,
    /// Binary entropy (bits) of the concept probabilities `[B, k]`.
    pub entropy: Array,
    /// Label-head input `[B, bottleneck_dim]`.
    pub bottleneck: Array,
    /// Per-sample bottlenecks, present when requested via
    /// [`ForwardOptions::keep_samples`].
    pub per_sample_bottlenecks: Option<Vec<Array>>,
}

/// A wired model: configuration plus the value graph holding its weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Opaque provenance tag stamped by training and carried in the file.
    pub fingerprint: Option<String>,
    pub mg: ModelGraph,
}

impl Model {
    /// Builds a freshly initialized model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let params = init_params(&config)?;
        Model::from_params(config, params)
    }

    /// Builds a model around an explicit parameter set.
    pub fn from_params(
        config: ModelConfig,
        params: IndexMap<String, Array>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        validate_params(&config, &params)?;
        let mg = wiring::build(&config, &params)?;
        Ok(Model {
            config,
            fingerprint: None,
            mg,
        })
    }

    pub fn graph(&self) -> &crate::ValueGraph {
        &self.mg.graph
    }

    pub fn graph_mut(&mut self) -> &mut crate::ValueGraph {
        &mut self.mg.graph
    }

    /// Extracts the current parameter values in canonical order.
    pub fn params(&self) -> IndexMap<String, Array> {
        self.mg
            .graph
            .param_names()
            .into_iter()
            .map(|name| {
                let value = self.mg.graph.param_value(name).expect("param exists").clone();
                (name.to_string(), value)
            })
            .collect()
    }

    /// Draws one residual keep mask (1 keeps, 0 drops) for a batch.
    pub fn draw_keep_mask(&self, batch: usize, dropout_p: f64, seed: u64) -> Array {
        let k = self.config.n_concepts;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data = (0..batch * k)
            .map(|_| if rng.gen_bool(1.0 - dropout_p) { 1.0 } else { 0.0 })
            .collect();
        Array::from_raw(vec![batch, k], data)
    }

    fn base_bindings(
        &self,
        x: &Array,
        intervention: Option<(&Array, &Array)>,
        calibrated: bool,
    ) -> Result<(Bindings<f64>, usize), ModelError> {
        if x.rank() != 2 || x.shape()[1] != self.config.n_features {
            return Err(ModelError::Input(format!(
                "x has shape {:?}, expected [B, {}]",
                x.shape(),
                self.config.n_features
            )));
        }
        let batch = x.shape()[0];
        let k = self.config.n_concepts;
        let mut b = Bindings::new();
        b.set(INPUT_X, x.clone());
        match intervention {
            Some((mask, values)) => {
                for (name, arr) in [(INPUT_INT_MASK, mask), (INPUT_INT_VALUES, values)] {
                    if arr.shape() != [batch, k] {
                        return Err(ModelError::Input(format!(
                            "{name} has shape {:?}, expected [{batch}, {k}]",
                            arr.shape()
                        )));
                    }
                }
                b.set(INPUT_INT_MASK, mask.clone());
                b.set(INPUT_INT_VALUES, values.clone());
            }
            None => {
                b.set(INPUT_INT_MASK, Array::zeros(&[batch, k]));
                b.set(INPUT_INT_VALUES, Array::zeros(&[batch, k]));
            }
        }
        let u = if calibrated {
            Array::ones(&[k])
        } else {
            Array::zeros(&[k])
        };
        b.set(INPUT_USE_CAL, u);
        Ok((b, batch))
    }

    /// Monte-Carlo averaged forward pass, optionally under an intervention
    /// (`mask`, `values`), both `[B, k]`. With `dropout_p = 0` (or no
    /// dropout path at all) a single deterministic sample is computed
    /// regardless of `mc_samples`.
    pub fn forward(
        &self,
        x: &Array,
        intervention: Option<(&Array, &Array)>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        if !(opts.dropout_p.is_finite() && (0.0..=1.0).contains(&opts.dropout_p)) {
            return Err(ModelError::Input(format!(
                "dropout_p {} outside [0, 1]",
                opts.dropout_p
            )));
        }
        let (mut bindings, batch) = self.base_bindings(x, intervention, opts.calibrated)?;
        let mg = &self.mg;
        let stochastic = mg.drop_mask.is_some() && opts.dropout_p > 0.0;
        let samples = if stochastic { opts.mc_samples.max(1) } else { 1 };
        let k = self.config.n_concepts;

        let mut probs_acc: Option<Vec<f64>> = None;
        let mut bneck_acc: Option<Vec<f64>> = None;
        let mut per_sample: Vec<Array> = Vec::new();
        let mut fixed: Option<(Array, Array, Array)> = None;
        for s in 0..samples {
            if mg.drop_mask.is_some() {
                let mask = if stochastic {
                    self.draw_keep_mask(batch, opts.dropout_p, subseed_n(opts.rng_seed, "mc", s as u64))
                } else {
                    Array::ones(&[batch, k])
                };
                bindings.set(INPUT_DROP_MASK, mask);
            }
            let mut targets = vec![mg.probs, mg.bottleneck];
            if fixed.is_none() {
                targets.extend([mg.concept_logits, mg.concept_probs, mg.entropy]);
            }
            let eval = mg.graph.evaluate_nodes(&bindings, &targets)?;
            if fixed.is_none() {
                fixed = Some((
                    eval.value(mg.concept_logits).clone(),
                    eval.value(mg.concept_probs).clone(),
                    eval.value(mg.entropy).clone(),
                ));
            }
            accumulate(&mut probs_acc, eval.value(mg.probs));
            accumulate(&mut bneck_acc, eval.value(mg.bottleneck));
            if opts.keep_samples {
                per_sample.push(eval.value(mg.bottleneck).clone());
            }
        }
        let (concept_logits, concept_probs, entropy) = fixed.expect("at least one sample");
        let inv = 1.0 / samples as f64;
        let probs_data: Vec<f64> = probs_acc.unwrap().into_iter().map(|v| v * inv).collect();
        let bneck_data: Vec<f64> = bneck_acc.unwrap().into_iter().map(|v| v * inv).collect();
        Ok(ForwardOutput {
            probs: Array::from_raw(vec![batch, self.config.n_classes], probs_data),
            bottleneck: Array::from_raw(vec![batch, self.config.bottleneck_dim()], bneck_data),
            concept_logits,
            concept_probs,
            entropy,
            per_sample_bottlenecks: opts.keep_samples.then_some(per_sample),
        })
    }

    fn prior_eval(&self, c: &Array, node: Option<NodeId>) -> Result<Array, ModelError> {
        let (Some(_), Some(node)) = (self.mg.c_prior, node) else {
            return Err(ModelError::NoPriorPath {
                kind: self.config.kind,
            });
        };
        if c.rank() != 2 || c.shape()[1] != self.config.n_concepts {
            return Err(ModelError::Input(format!(
                "c has shape {:?}, expected [B, {}]",
                c.shape(),
                self.config.n_concepts
            )));
        }
        let mut b = Bindings::new();
        b.set(INPUT_C_PRIOR, c.clone());
        let eval = self.mg.graph.evaluate_nodes(&b, &[node])?;
        Ok(eval.value(node).clone())
    }

    /// Runs the prior head on explicit concept values `c` `[B, k]`,
    /// returning the prior task probabilities `[B, L]`. Only models with a
    /// prior path support this.
    pub fn prior_forward(&self, c: &Array) -> Result<Array, ModelError> {
        self.prior_eval(c, self.mg.prior_probs)
    }

    /// The global-embedding mixture `E(c) .* pos + E(1-c) .* neg` for
    /// explicit concept values `c` `[B, k]`, i.e. the input-independent
    /// bottleneck the model falls back to at zero residual.
    pub fn prior_bottleneck(&self, c: &Array) -> Result<Array, ModelError> {
        self.prior_eval(c, self.mg.prior_bottleneck)
    }

    /// Serializes config and parameters to a JSON model file.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            kind: self.config.kind,
            config: self.config.clone(),
            fingerprint: self.fingerprint.clone(),
            params: self
                .params()
                .into_iter()
                .map(|(name, value)| ParamEntry {
                    name,
                    shape: value.shape().to_vec(),
                    data: value.into_data(),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| ModelError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(path, text + "\n").map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    /// Loads a model file written by [`Model::save`] and rewires the graph.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| ModelError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if file.format != MODEL_FORMAT {
            return Err(ModelError::Format {
                path: path.display().to_string(),
                detail: format!("format `{}`, expected `{MODEL_FORMAT}`", file.format),
            });
        }
        if file.kind != file.config.kind {
            return Err(ModelError::Format {
                path: path.display().to_string(),
                detail: format!(
                    "header kind {} contradicts config kind {}",
                    file.kind, file.config.kind
                ),
            });
        }
        let mut params = IndexMap::new();
        for entry in file.params {
            let value = Array::new(entry.shape, entry.data)?;
            if params.insert(entry.name.clone(), value).is_some() {
                return Err(ModelError::Format {
                    path: path.display().to_string(),
                    detail: format!("duplicate parameter {}", entry.name),
                });
            }
        }
        let mut model = Model::from_params(file.config, params)?;
        model.fingerprint = file.fingerprint;
        Ok(model)
    }
}

fn accumulate(acc: &mut Option<Vec<f64>>, value: &Array) {
    match acc {
        None => *acc = Some(value.data().to_vec()),
        Some(sum) => {
            for (s, v) in sum.iter_mut().zip(value.data()) {
                *s += v;
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    kind: ModelKind,
    config: ModelConfig,
    fingerprint: Option<String>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Binary entropy in bits with endpoint protection; the scalar twin of the
/// in-graph entropy node, matching it bit-for-bit.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    -(p * (p + ENTROPY_DELTA).ln() + q * (q + ENTROPY_DELTA).ln())
        * (1.0 / std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Bindings;

    fn mix_config(seed: u64) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::MixCem,
            n_features: 3,
            n_concepts: 2,
            n_classes: 3,
            embed_dim: 2,
            backbone: vec![4],
            n_unaligned: 0,
            leaky_slope: 0.01,
            entropy_gate: true,
            seed,
        }
    }

    fn vanilla_config(seed: u64) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::VanillaCbm,
            n_features: 3,
            n_concepts: 2,
            n_classes: 3,
            embed_dim: 1,
            backbone: vec![4],
            n_unaligned: 0,
            leaky_slope: 0.01,
            entropy_gate: true,
            seed,
        }
    }

    fn rand_x(rows: usize, cols: usize, seed: u64) -> Array {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array::from_raw(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
    }

    #[test]
    fn init_is_deterministic_and_independent_per_param() {
        let a = init_params(&mix_config(7)).unwrap();
        let b = init_params(&mix_config(7)).unwrap();
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (name, v) in &a {
            assert!(v.value_eq(&b[name]), "{name} changed between draws");
        }
        let c = init_params(&mix_config(8)).unwrap();
        assert!(!a["head/w"].value_eq(&c["head/w"]));
        // Biases start at zero, Platt scaling at the identity.
        assert!(a["head/b"].data().iter().all(|&v| v == 0.0));
        assert!(a["platt_a"].data().iter().all(|&v| v == 1.0));
        assert!(a["platt_b"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation_catches_misuse() {
        let mut cfg = vanilla_config(0);
        cfg.n_unaligned = 3;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::InvalidConfig { field, .. }) if field == "n_unaligned"
        ));
        let mut cfg = mix_config(0);
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
        // Slope 1 degenerates the rectifiers to linear maps and is allowed;
        // 0 and anything above 1 are not.
        let mut cfg = mix_config(0);
        cfg.leaky_slope = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.leaky_slope = 0.0;
        assert!(cfg.validate().is_err());
        cfg.leaky_slope = 1.5;
        assert!(cfg.validate().is_err());
        // Only the MixCEM gate can be switched off.
        let mut cfg = vanilla_config(0);
        cfg.entropy_gate = false;
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::InvalidConfig { field, .. }) if field == "entropy_gate"
        ));
        let mut cfg = mix_config(0);
        cfg.entropy_gate = false;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn param_validation_rejects_bad_sets() {
        let cfg = vanilla_config(1);
        let mut params = init_params(&cfg).unwrap();
        let removed = params.shift_remove("head/b").unwrap();
        assert!(matches!(
            Model::from_params(cfg.clone(), params.clone()),
            Err(ModelError::MissingParam { name }) if name == "head/b"
        ));
        params.insert("head/b".into(), Array::zeros(&[5]));
        assert!(matches!(
            Model::from_params(cfg.clone(), params.clone()),
            Err(ModelError::ParamShape { name, .. }) if name == "head/b"
        ));
        params.insert("head/b".into(), removed);
        params.insert("rogue".into(), Array::zeros(&[1]));
        assert!(matches!(
            Model::from_params(cfg, params),
            Err(ModelError::UnexpectedParam { name }) if name == "rogue"
        ));
    }

    /// Straight-line reference implementation of the MixCEM forward pass,
    /// written without the graph machinery.
    fn mixcem_reference(
        params: &IndexMap<String, Array>,
        cfg: &ModelConfig,
        x: &Array,
        keep: &Array,
        int_mask: &Array,
        int_values: &Array,
    ) -> (Array, Array, Array) {
        let (batch, k, m) = (x.shape()[0], cfg.n_concepts, cfg.embed_dim);
        let h_dim = cfg.backbone_dim();
        let slope = cfg.leaky_slope;
        // Backbone.
        let w0 = &params["backbone/0/w"];
        let b0 = &params["backbone/0/b"];
        let mut h = vec![0.0; batch * h_dim];
        for r in 0..batch {
            for j in 0..h_dim {
                let mut acc = 0.0;
                for i in 0..cfg.n_features {
                    acc += x.at(r, i) * w0.at(i, j);
                }
                acc += b0.data()[j];
                h[r * h_dim + j] = if acc > 0.0 { acc } else { slope * acc };
            }
        }
        let lin = |w: &Array, b: &Array, r: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for i in 0..h_dim {
                acc += h[r * h_dim + i] * w.at(i, j);
            }
            acc + b.data()[j]
        };
        let rp_w = &params["concepts/pos_residual/w"];
        let rp_b = &params["concepts/pos_residual/b"];
        let rn_w = &params["concepts/neg_residual/w"];
        let rn_b = &params["concepts/neg_residual/b"];
        let pos_embed = params["concepts/pos_embed"].data();
        let neg_embed = params["concepts/neg_embed"].data();
        let vs = params["scorer/w"].data();
        let a_cal = params["platt_a"].data();
        let b_cal = params["platt_b"].data();
        let head_w = &params["head/w"];
        let head_b = params["head/b"].data();

        let mut bneck = vec![0.0; batch * k * m];
        let mut probs = vec![0.0; batch * cfg.n_classes];
        let mut p_cal_out = vec![0.0; batch * k];
        for r in 0..batch {
            for i in 0..k {
                // Score from raw (ungated) residual-augmented embeddings.
                let mut z = 0.0;
                for j in 0..m {
                    let idx = i * m + j;
                    z += vs[j] * (pos_embed[idx] + lin(rp_w, rp_b, r, idx));
                    z += vs[m + j] * (neg_embed[idx] + lin(rn_w, rn_b, r, idx));
                }
                let p = 1.0 / (1.0 + (-(a_cal[i] * z + b_cal[i])).exp());
                p_cal_out[r * k + i] = p;
                let gate = 1.0 - bernoulli_entropy(p);
                let d = keep.at(r, i);
                let q = if int_mask.at(r, i) == 1.0 {
                    int_values.at(r, i)
                } else {
                    p
                };
                for j in 0..m {
                    let idx = i * m + j;
                    let cp = pos_embed[idx] + gate * d * lin(rp_w, rp_b, r, idx);
                    let cn = neg_embed[idx] + gate * d * lin(rn_w, rn_b, r, idx);
                    bneck[(r * k + i) * m + j] = q * cp + (1.0 - q) * cn;
                }
            }
            // Head + softmax.
            let mut logits = vec![0.0; cfg.n_classes];
            for (t, l) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..k * m {
                    acc += bneck[r * k * m + i] * head_w.at(i, t);
                }
                *l = acc + head_b[t];
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (t, e) in exps.iter().enumerate() {
                probs[r * cfg.n_classes + t] = e / total;
            }
        }
        (
            Array::from_raw(vec![batch, k * m], bneck),
            Array::from_raw(vec![batch, cfg.n_classes], probs),
            Array::from_raw(vec![batch, k], p_cal_out),
        )
    }

    #[test]
    fn mixcem_graph_matches_reference_forward() {
        let cfg = mix_config(42);
        let model = Model::new(cfg.clone()).unwrap();
        let x = rand_x(3, 3, 1);
        let keep = Array::from_raw(vec![3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let int_mask = Array::from_raw(vec![3, 2], vec![0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let int_values = Array::from_raw(vec![3, 2], vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

        let mut b = Bindings::new();
        b.set(INPUT_X, x.clone());
        b.set(INPUT_DROP_MASK, keep.clone());
        b.set(INPUT_INT_MASK, int_mask.clone());
        b.set(INPUT_INT_VALUES, int_values.clone());
        b.set(INPUT_USE_CAL, Array::ones(&[2]));
        let mg = &model.mg;
        let eval = mg
            .graph
            .evaluate_nodes(&b, &[mg.bottleneck, mg.probs, mg.concept_probs])
            .unwrap();

        let params = model.params();
        let (ref_bneck, ref_probs, ref_pcal) =
            mixcem_reference(&params, &cfg, &x, &keep, &int_mask, &int_values);
        assert!(eval.value(mg.bottleneck).max_abs_diff(&ref_bneck).unwrap() < 1e-12);
        assert!(eval.value(mg.probs).max_abs_diff(&ref_probs).unwrap() < 1e-12);
        assert!(eval.value(mg.concept_probs).max_abs_diff(&ref_pcal).unwrap() < 1e-12);
    }

    #[test]
    fn vanilla_graph_matches_reference_forward() {
        let cfg = vanilla_config(9);
        let model = Model::new(cfg.clone()).unwrap();
        let x = rand_x(4, 3, 2);
        let out = model.forward(&x, None, &ForwardOptions::default()).unwrap();

        let params = model.params();
        let w0 = &params["backbone/0/w"];
        let b0 = &params["backbone/0/b"];
        let wc = &params["concepts/w"];
        let bc = &params["concepts/b"];
        let wh = &params["head/w"];
        let bh = &params["head/b"];
        for r in 0..4 {
            let mut h = vec![0.0; 4];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += x.at(r, i) * w0.at(i, j);
                }
                acc += b0.data()[j];
                *hj = if acc > 0.0 { acc } else { 0.01 * acc };
            }
            let mut p = vec![0.0; 2];
            for (i, pi) in p.iter_mut().enumerate() {
                let mut z = 0.0;
                for (j, hj) in h.iter().enumerate() {
                    z += hj * wc.at(j, i);
                }
                z += bc.data()[i];
                *pi = 1.0 / (1.0 + (-z).exp());
            }
            let mut logits = vec![0.0; 3];
            for (t, l) in logits.iter_mut().enumerate() {
                *l = p[0] * wh.at(0, t) + p[1] * wh.at(1, t) + bh.data()[t];
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for t in 0..3 {
                assert!((out.probs.at(r, t) - exps[t] / total).abs() < 1e-12);
                assert!((out.bottleneck.at(r, t.min(1)) - p[t.min(1)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        for cfg in [mix_config(3), vanilla_config(3)] {
            let model = Model::new(cfg).unwrap();
            let x = rand_x(5, 3, 4);
            let out = model.forward(&x, None, &ForwardOptions::default()).unwrap();
            for r in 0..5 {
                let total: f64 = out.probs.row(r).iter().sum();
                assert!((total - 1.0).abs() < 1e-12, "row {r} sums to {total}");
            }
        }
    }

    #[test]
    fn fully_intervened_vanilla_ignores_its_input() {
        let model = Model::new(vanilla_config(5)).unwrap();
        let mask = Array::ones(&[4, 2]);
        let values = Array::from_raw(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let a = model
            .forward(&rand_x(4, 3, 10), Some((&mask, &values)), &ForwardOptions::default())
            .unwrap();
        let b = model
            .forward(&rand_x(4, 3, 11), Some((&mask, &values)), &ForwardOptions::default())
            .unwrap();
        // Bit-identical: the overridden bottleneck is exactly the 0/1
        // values, so no trace of x survives.
        assert!(a.probs.value_eq(&b.probs));
        assert!(a.bottleneck.value_eq(&values));
    }

    #[test]
    fn hybrid_with_zero_unaligned_units_is_vanilla() {
        let mut hybrid_cfg = vanilla_config(5);
        hybrid_cfg.kind = ModelKind::HybridCbm;
        let hybrid = Model::new(hybrid_cfg).unwrap();
        let vanilla = Model::new(vanilla_config(5)).unwrap();
        let hp = hybrid.params();
        let vp = vanilla.params();
        assert_eq!(hp.keys().collect::<Vec<_>>(), vp.keys().collect::<Vec<_>>());
        for (name, v) in &hp {
            assert!(v.value_eq(&vp[name]), "{name} differs");
        }
        let x = rand_x(6, 3, 12);
        let a = hybrid.forward(&x, None, &ForwardOptions::default()).unwrap();
        let b = vanilla.forward(&x, None, &ForwardOptions::default()).unwrap();
        assert!(a.probs.value_eq(&b.probs));
        assert!(a.bottleneck.value_eq(&b.bottleneck));
    }

    #[test]
    fn hybrid_unaligned_channel_bypasses_interventions() {
        let mut cfg = vanilla_config(6);
        cfg.kind = ModelKind::HybridCbm;
        cfg.n_unaligned = 3;
        let model = Model::new(cfg).unwrap();
        let mask = Array::ones(&[2, 2]);
        let values = Array::from_raw(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = model
            .forward(&rand_x(2, 3, 20), Some((&mask, &values)), &ForwardOptions::default())
            .unwrap();
        let b = model
            .forward(&rand_x(2, 3, 21), Some((&mask, &values)), &ForwardOptions::default())
            .unwrap();
        // The aligned slots are pinned, but the unaligned ones still track
        // the input, so predictions differ across inputs.
        for r in 0..2 {
            for i in 0..2 {
                assert_eq!(a.bottleneck.at(r, i), values.at(r, i));
                assert_eq!(b.bottleneck.at(r, i), values.at(r, i));
            }
        }
        assert!(!a.probs.value_eq(&b.probs));
    }

    #[test]
    fn mixcem_collapses_to_prior_under_full_dropout_and_intervention() {
        let model = Model::new(mix_config(13)).unwrap();
        let mg = &model.mg;
        let x = rand_x(3, 3, 30);
        let c = Array::from_raw(vec![3, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let mut b = Bindings::new();
        b.set(INPUT_X, x);
        b.set(INPUT_DROP_MASK, Array::zeros(&[3, 2]));
        b.set(INPUT_INT_MASK, Array::ones(&[3, 2]));
        b.set(INPUT_INT_VALUES, c.clone());
        b.set(INPUT_C_PRIOR, c);
        b.set(INPUT_USE_CAL, Array::ones(&[2]));
        let eval = mg
            .graph
            .evaluate_nodes(
                &b,
                &[
                    mg.bottleneck,
                    mg.logits,
                    mg.prior_bottleneck.unwrap(),
                    mg.prior_logits.unwrap(),
                ],
            )
            .unwrap();
        // Bit-for-bit: zero keep mask kills every residual exactly and the
        // full override substitutes the same 0/1 mixture the prior uses.
        assert!(eval
            .value(mg.bottleneck)
            .value_eq(eval.value(mg.prior_bottleneck.unwrap())));
        assert!(eval
            .value(mg.logits)
            .value_eq(eval.value(mg.prior_logits.unwrap())));
    }

    #[test]
    fn gate_closes_at_maximal_uncertainty() {
        // Forcing the calibrated probability to exactly 1/2 drives the
        // binary entropy to 1 bit, so the residual gate shuts and the
        // bottleneck falls back to the global-embedding mixture at q = 1/2.
        let mut model = Model::new(mix_config(14)).unwrap();
        model
            .mg
            .graph
            .set_param("platt_a", Array::zeros(&[2]))
            .unwrap();
        let x = rand_x(2, 3, 40);
        let out = model.forward(&x, None, &ForwardOptions::default()).unwrap();
        for v in out.concept_probs.data() {
            assert_eq!(*v, 0.5);
        }
        for v in out.entropy.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let params = model.params();
        let pos = params["concepts/pos_embed"].data();
        let neg = params["concepts/neg_embed"].data();
        for r in 0..2 {
            for i in 0..4 {
                let anchor = 0.5 * pos[i] + 0.5 * neg[i];
                assert!((out.bottleneck.at(r, i) - anchor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concept_path_is_unaffected_by_dropout_and_interventions() {
        let model = Model::new(mix_config(15)).unwrap();
        let mg = &model.mg;
        let x = rand_x(3, 3, 50);
        let run = |keep: Array, mask: Array, values: Array| {
            let mut b = Bindings::new();
            b.set(INPUT_X, x.clone());
            b.set(INPUT_DROP_MASK, keep);
            b.set(INPUT_INT_MASK, mask);
            b.set(INPUT_INT_VALUES, values);
            b.set(INPUT_USE_CAL, Array::ones(&[2]));
            let eval = mg
                .graph
                .evaluate_nodes(&b, &[mg.concept_probs, mg.entropy])
                .unwrap();
            (
                eval.value(mg.concept_probs).clone(),
                eval.value(mg.entropy).clone(),
            )
        };
        let (p0, e0) = run(
            Array::ones(&[3, 2]),
            Array::zeros(&[3, 2]),
            Array::zeros(&[3, 2]),
        );
        let (p1, e1) = run(
            Array::zeros(&[3, 2]),
            Array::ones(&[3, 2]),
            Array::ones(&[3, 2]),
        );
        assert!(p0.value_eq(&p1));
        assert!(e0.value_eq(&e1));
    }

    #[test]
    fn mc_forward_is_deterministic_in_the_seed() {
        let model = Model::new(mix_config(16)).unwrap();
        let x = rand_x(4, 3, 60);
        let opts = ForwardOptions {
            mc_samples: 8,
            rng_seed: 123,
            ..Default::default()
        };
        let a = model.forward(&x, None, &opts).unwrap();
        let b = model.forward(&x, None, &opts).unwrap();
        assert!(a.probs.value_eq(&b.probs));
        assert!(a.bottleneck.value_eq(&b.bottleneck));
        let c = model
            .forward(
                &x,
                None,
                &ForwardOptions {
                    mc_samples: 8,
                    rng_seed: 124,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(!a.probs.value_eq(&c.probs));
    }

    #[test]
    fn model_file_round_trips_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model = Model::new(mix_config(17)).unwrap();
        model.fingerprint = Some("0123abcd".into());
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.fingerprint.as_deref(), Some("0123abcd"));
        for (name, v) in model.params() {
            assert!(v.value_eq(&loaded.params()[&name]), "{name} drifted");
        }
        let x = rand_x(3, 3, 70);
        let opts = ForwardOptions {
            mc_samples: 4,
            rng_seed: 7,
            ..Default::default()
        };
        let a = model.forward(&x, None, &opts).unwrap();
        let b = loaded.forward(&x, None, &opts).unwrap();
        assert!(a.probs.value_eq(&b.probs));
        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn prior_forward_requires_a_prior_head() {
        let model = Model::new(vanilla_config(18)).unwrap();
        let c = Array::zeros(&[2, 2]);
        assert!(matches!(
            model.prior_forward(&c),
            Err(ModelError::NoPriorPath { .. })
        ));
        let mix = Model::new(mix_config(18)).unwrap();
        let p = mix.prior_forward(&c).unwrap();
        assert_eq!(p.shape(), [2, 3]);
        for r in 0..2 {
            let total: f64 = p.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // One concept with a width-1 embedding: the whole MixCEM overhead
        // beyond the backbone is two anchors, two residual maps, the shared
        // scorer, the head and the two Platt vectors.
        let (n, a, l) = (3usize, 4usize, 3usize);
        let cfg = ModelConfig {
            kind: ModelKind::MixCem,
            n_features: n,
            n_concepts: 1,
            n_classes: l,
            embed_dim: 1,
            backbone: vec![a],
            n_unaligned: 0,
            leaky_slope: 0.01,
            entropy_gate: true,
            seed: 31,
        };
        let params = init_params(&cfg).unwrap();
        let total: usize = params.values().map(|v| v.data().len()).sum();
        let psi = n * a + a;
        assert_eq!(total, psi + 2 + 2 * a + 2 + 2 + (l + l) + 2);
    }

    #[test]
    fn bottleneck_stays_between_the_contextual_embeddings() {
        // The mixture is q*pos + (1-q)*neg with q in [0, 1], so every
        // bottleneck coordinate lies in the interval its two embeddings
        // span (up to one rounding step).
        let cem_cfg = {
            let mut c = mix_config(26);
            c.kind = ModelKind::Cem;
            c
        };
        for cfg in [mix_config(25), cem_cfg] {
            let model = Model::new(cfg).unwrap();
            let mg = &model.mg;
            let x = rand_x(5, 3, 91);
            let mut b = Bindings::new();
            b.set(INPUT_X, x);
            b.set(INPUT_INT_MASK, Array::zeros(&[5, 2]));
            b.set(INPUT_INT_VALUES, Array::zeros(&[5, 2]));
            b.set(INPUT_USE_CAL, Array::ones(&[2]));
            if mg.drop_mask.is_some() {
                b.set(INPUT_DROP_MASK, Array::ones(&[5, 2]));
            }
            let (pos, neg) = (mg.ctx_pos.unwrap(), mg.ctx_neg.unwrap());
            let eval = mg
                .graph
                .evaluate_nodes(&b, &[mg.bottleneck, pos, neg])
                .unwrap();
            let bn = eval.value(mg.bottleneck);
            let cp = eval.value(pos);
            let cn = eval.value(neg);
            for ((v, p), n) in bn.data().iter().zip(cp.data()).zip(cn.data()) {
                let (lo, hi) = (p.min(*n), p.max(*n));
                assert!(
                    (lo - 1e-12..=hi + 1e-12).contains(v),
                    "{v} outside [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn uncalibrated_forward_reports_the_raw_sigmoid() {
        let mut model = Model::new(mix_config(27)).unwrap();
        model
            .mg
            .graph
            .set_param("platt_b", Array::full(&[2], 3.0))
            .unwrap();
        let x = rand_x(3, 3, 95);
        let cal = model.forward(&x, None, &ForwardOptions::default()).unwrap();
        let raw = model
            .forward(
                &x,
                None,
                &ForwardOptions {
                    calibrated: false,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(!cal.concept_probs.value_eq(&raw.concept_probs));
        let sig = |z: f64| {
            if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            }
        };
        for (p, z) in raw.concept_probs.data().iter().zip(raw.concept_logits.data()) {
            assert_eq!(*p, sig(*z));
        }
        // The gate follows whichever probability is in force.
        for (h, p) in raw.entropy.data().iter().zip(raw.concept_probs.data()) {
            assert_eq!(*h, bernoulli_entropy(*p));
        }
    }

    #[test]
    fn gate_ablated_mixcem_with_zero_anchors_is_a_linear_cem() {
        // Kill the anchors, pin the gate open and keep every rectifier in
        // its linear regime: the residual maps then play exactly the role
        // of CEM's embedding generators, and transplanting the weights
        // reproduces the CEM forward pass bit for bit.
        let mut mix_cfg = mix_config(23);
        mix_cfg.entropy_gate = false;
        mix_cfg.leaky_slope = 1.0;
        let mut mix = Model::new(mix_cfg.clone()).unwrap();
        let zeros = Array::zeros(&[4]);
        for name in ["concepts/pos_embed", "concepts/neg_embed"] {
            mix.mg.graph.set_param(name, zeros.clone()).unwrap();
        }

        let mut cem_cfg = mix_cfg;
        cem_cfg.kind = ModelKind::Cem;
        cem_cfg.entropy_gate = true;
        let mut cem_params = IndexMap::new();
        for (name, value) in &mix.params() {
            let target = match name.as_str() {
                "concepts/pos_embed" | "concepts/neg_embed" => continue,
                "concepts/pos_residual/w" => "concepts/pos_proj/w",
                "concepts/pos_residual/b" => "concepts/pos_proj/b",
                "concepts/neg_residual/w" => "concepts/neg_proj/w",
                "concepts/neg_residual/b" => "concepts/neg_proj/b",
                other => other,
            };
            cem_params.insert(target.to_string(), value.clone());
        }
        let cem = Model::from_params(cem_cfg, cem_params).unwrap();

        let x = rand_x(4, 3, 90);
        let opts = ForwardOptions {
            dropout_p: 0.0,
            mc_samples: 1,
            ..Default::default()
        };
        let a = mix.forward(&x, None, &opts).unwrap();
        let b = cem.forward(&x, None, &opts).unwrap();
        assert!(a.concept_probs.value_eq(&b.concept_probs));
        assert!(a.bottleneck.value_eq(&b.bottleneck));
        assert!(a.probs.value_eq(&b.probs));
    }

    #[test]
    fn prior_bottleneck_mixes_the_anchors_exactly() {
        let mut cfg = mix_config(28);
        cfg.embed_dim = 1;
        let mut model = Model::new(cfg).unwrap();
        model
            .mg
            .graph
            .set_param("concepts/pos_embed", Array::from_raw(vec![2], vec![5.0, 7.0]))
            .unwrap();
        model
            .mg
            .graph
            .set_param(
                "concepts/neg_embed",
                Array::from_raw(vec![2], vec![-1.0, -3.0]),
            )
            .unwrap();
        let c = Array::from_raw(vec![1, 2], vec![1.0, 0.0]);
        let bn = model.prior_bottleneck(&c).unwrap();
        assert_eq!(bn.shape(), [1, 2]);
        assert_eq!(bn.data(), &[5.0, -3.0]);
    }

    #[test]
    fn per_sample_bottlenecks_replay_with_the_seed() {
        let model = Model::new(mix_config(29)).unwrap();
        let x = rand_x(3, 3, 97);
        let opts = ForwardOptions {
            mc_samples: 5,
            rng_seed: 11,
            keep_samples: true,
            ..Default::default()
        };
        let a = model.forward(&x, None, &opts).unwrap();
        let b = model.forward(&x, None, &opts).unwrap();
        let sa = a.per_sample_bottlenecks.as_ref().unwrap();
        let sb = b.per_sample_bottlenecks.as_ref().unwrap();
        assert_eq!(sa.len(), 5);
        for (u, v) in sa.iter().zip(sb) {
            assert!(u.value_eq(v));
        }
        assert!(sa.iter().skip(1).any(|s| !s.value_eq(&sa[0])));
        // Their mean is the reported bottleneck.
        let mut mean = vec![0.0; sa[0].data().len()];
        for s in sa {
            for (m, v) in mean.iter_mut().zip(s.data()) {
                *m += v;
            }
        }
        for (got, want) in a.bottleneck.data().iter().zip(&mean) {
            assert!((got - want / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dropout_forward_is_deterministic_and_single_sample() {
        let model = Model::new(mix_config(33)).unwrap();
        let x = rand_x(3, 3, 99);
        let one = model
            .forward(
                &x,
                None,
                &ForwardOptions {
                    dropout_p: 0.0,
                    mc_samples: 1,
                    rng_seed: 1,
                    ..Default::default()
                },
            )
            .unwrap();
        let many = model
            .forward(
                &x,
                None,
                &ForwardOptions {
                    dropout_p: 0.0,
                    mc_samples: 40,
                    rng_seed: 2,
                    ..Default::default()
                },
            )
            .unwrap();
        // No residual is dropped, so sample count and seed are irrelevant.
        assert!(one.probs.value_eq(&many.probs));
        assert!(one.bottleneck.value_eq(&many.bottleneck));
    }

    #[test]
    fn entropy_helper_matches_graph_and_endpoints() {
        assert_eq!(bernoulli_entropy(0.0), 0.0);
        assert_eq!(bernoulli_entropy(1.0), 0.0);
        assert!((bernoulli_entropy(0.5) - 1.0).abs() < 1e-15);
        for p in [0.1, 0.25, 0.5, 0.9, 0.999] {
            let d = (bernoulli_entropy(p) - bernoulli_entropy(1.0 - p)).abs();
            assert!(d < 1e-12, "asymmetric at {p}");
        }
        // The graph twin produces bit-identical values.
        let model = Model::new(mix_config(19)).unwrap();
        let x = rand_x(3, 3, 80);
        let out = model.forward(&x, None, &ForwardOptions::default()).unwrap();
        for (p, h) in out.concept_probs.data().iter().zip(out.entropy.data()) {
            assert_eq!(*h, bernoulli_entropy(*p));
        }
    }
}
