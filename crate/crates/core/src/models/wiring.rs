//! Computation-graph wiring for every model family.
//!
//! Each architecture is assembled once as a value graph whose parameters
//! live in the graph's `Param` nodes and whose run-time quantities — the
//! input batch, intervention masks, residual dropout masks, prior concepts —
//! are `Input` leaves bound by name at evaluation time. A single graph
//! therefore serves training, plain inference, Monte-Carlo sampling and
//! concept interventions; the callers merely change what they bind and
//! which nodes they request.
//!
//! Two constant matrices do the index bookkeeping exactly: the expander `E`
//! (`[k, k*m]`, one 1 per row block) replicates per-concept scalars across
//! embedding coordinates via matmul, and its transpose sums per-concept
//! blocks back down. Because their entries are exactly 0 or 1, both are
//! lossless in floating point.

use super::{ModelConfig, ModelError, ModelKind};
use crate::graph::NodeId;
use crate::{Array, ValueGraph};
use indexmap::IndexMap;

/// Binding name of the input batch `[B, n_features]`.
pub const INPUT_X: &str = "x";
/// Binding name of the intervention mask `[B, k]`, 1 where intervened.
pub const INPUT_INT_MASK: &str = "int_mask";
/// Binding name of the intervention values `[B, k]`, 0/1 ground truth.
pub const INPUT_INT_VALUES: &str = "int_values";
/// Binding name of the residual keep mask `[B, k]`, 1 keeps the residual.
pub const INPUT_DROP_MASK: &str = "drop_mask";
/// Binding name of the prior-path concept values `[B, k]`.
pub const INPUT_C_PRIOR: &str = "c_prior";
/// Binding name of the calibration switch `[k]`: all-ones selects the
/// Platt-calibrated probabilities, all-zeros the raw sigmoid.
pub const INPUT_USE_CAL: &str = "use_cal";

/// A wired model graph plus handles to its interface nodes.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: ValueGraph,
    pub x: NodeId,
    pub int_mask: NodeId,
    pub int_values: NodeId,
    /// Residual keep mask; present only for models with residual dropout.
    pub drop_mask: Option<NodeId>,
    /// Prior-path concept input; present only for models with a prior head.
    pub c_prior: Option<NodeId>,
    /// Calibration switch input, bound to ones or zeros per call.
    pub use_cal: NodeId,
    /// Raw concept scores `z`, `[B, k]`.
    pub concept_logits: NodeId,
    /// Concept probabilities after the calibration switch, `[B, k]`.
    pub concept_probs: NodeId,
    /// Binary entropy of the concept probabilities, `[B, k]`.
    pub entropy: NodeId,
    /// Concept activations after any intervention override, `[B, k]`.
    pub q_mix: NodeId,
    /// Positive contextual embeddings feeding the mixture, `[B, k*m]`;
    /// present only for the embedding models.
    pub ctx_pos: Option<NodeId>,
    /// Negative counterpart of [`ModelGraph::ctx_pos`].
    pub ctx_neg: Option<NodeId>,
    /// The representation consumed by the label head.
    pub bottleneck: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
    pub prior_bottleneck: Option<NodeId>,
    pub prior_logits: Option<NodeId>,
    pub prior_probs: Option<NodeId>,
}

struct Ctx<'a> {
    g: ValueGraph,
    cfg: &'a ModelConfig,
    nodes: IndexMap<String, NodeId>,
    ones_k: NodeId,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a ModelConfig, params: &IndexMap<String, Array>) -> Self {
        let mut g = ValueGraph::new();
        // Materialize every parameter up front in canonical table order so
        // that graph extraction and the optimizer enumerate them
        // identically regardless of where the wiring first uses them.
        let mut nodes = IndexMap::new();
        for (name, value) in params {
            nodes.insert(name.clone(), g.param(name, value.clone()));
        }
        let ones_k = g.constant(Array::ones(&[cfg.n_concepts]));
        Ctx { g, cfg, nodes, ones_k }
    }

    fn p(&mut self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("wiring references unknown param {name}"))
    }

    /// `input @ W + b` with the pair of parameters under `prefix`.
    fn linear(&mut self, input: NodeId, prefix: &str) -> NodeId {
        let w = self.p(&format!("{prefix}/w"));
        let b = self.p(&format!("{prefix}/b"));
        let mm = self.g.matmul(input, w);
        self.g.add(mm, b)
    }

    fn backbone(&mut self, x: NodeId) -> NodeId {
        let slope = self.cfg.leaky_slope;
        let mut h = x;
        for i in 0..self.cfg.backbone.len() {
            h = self.linear(h, &format!("backbone/{i}"));
            h = self.g.leaky_relu(h, slope);
        }
        h
    }

    /// `1 - v` for a `[B, k]` (or `[k]`) node.
    fn one_minus(&mut self, v: NodeId) -> NodeId {
        let n = self.g.neg(v);
        self.g.add(n, self.ones_k)
    }

    /// Concept probabilities with a run-time switch between the raw and the
    /// Platt-calibrated sigmoid:
    /// `p = u * sigma(a*z + b) + (1 - u) * sigma(z)` with `u` bound to all
    /// ones or all zeros. The unused branch is multiplied by exactly zero,
    /// so neither its value nor its gradient bleeds through; in particular
    /// training with `u = 0` leaves the Platt parameters without gradient.
    fn concept_probs(&mut self, z: NodeId, use_cal: NodeId) -> NodeId {
        let a = self.p("platt_a");
        let b = self.p("platt_b");
        let p_raw = self.g.sigmoid(z);
        let za = self.g.mul(z, a);
        let zb = self.g.add(za, b);
        let p_cal = self.g.sigmoid(zb);
        let not_cal = self.one_minus(use_cal);
        let t_cal = self.g.mul(p_cal, use_cal);
        let t_raw = self.g.mul(p_raw, not_cal);
        self.g.add(t_cal, t_raw)
    }

    /// Binary entropy in bits of probabilities in `[0, 1]`, elementwise.
    /// The tiny additive constant inside the log keeps the endpoints exact
    /// (`H(0) = H(1) = 0`) without perturbing any other value at f64
    /// precision; see [`super::bernoulli_entropy`] for the scalar twin.
    fn entropy(&mut self, p: NodeId) -> NodeId {
        let k = self.cfg.n_concepts;
        let delta = self.g.constant(Array::full(&[k], super::ENTROPY_DELTA));
        let inv_ln2 = self
            .g
            .constant(Array::full(&[k], 1.0 / std::f64::consts::LN_2));
        let pd = self.g.add(p, delta);
        let lp = self.g.ln(pd);
        let t1 = self.g.mul(p, lp);
        let q = self.one_minus(p);
        let qd = self.g.add(q, delta);
        let lq = self.g.ln(qd);
        let t2 = self.g.mul(q, lq);
        let s = self.g.add(t1, t2);
        let n = self.g.neg(s);
        self.g.mul(n, inv_ln2)
    }

    /// Replaces entries of `p` by the bound intervention values where the
    /// mask is 1. Gradients are blocked on the overridden entries and flow
    /// untouched elsewhere.
    fn intervene(&mut self, p: NodeId, int_mask: NodeId, int_values: NodeId) -> NodeId {
        let keep = self.one_minus(int_mask);
        let kept = self.g.select_mask(p, keep);
        let set = self.g.select_mask(int_values, int_mask);
        self.g.add(kept, set)
    }

    /// `[v, v, ..., v]` (k copies) along the last axis.
    fn tile_k(&mut self, v: NodeId) -> NodeId {
        let copies = vec![v; self.cfg.n_concepts];
        self.g.concat(&copies)
    }

    /// The 0/1 expander `E: [k, k*m]` and its transpose.
    fn expander(&mut self) -> (NodeId, NodeId) {
        let k = self.cfg.n_concepts;
        let m = self.cfg.embed_dim;
        let mut e = Array::zeros(&[k, k * m]);
        let mut et = Array::zeros(&[k * m, k]);
        for i in 0..k {
            for j in 0..m {
                e.set(i, i * m + j, 1.0);
                et.set(i * m + j, i, 1.0);
            }
        }
        (self.g.constant(e), self.g.constant(et))
    }

    /// Shared concept scorer: per concept `i`,
    /// `z_i = v_pos . pos_i + v_neg . neg_i`
    /// where `pos`/`neg` are `[B, k*m]` stacked embeddings and the single
    /// length-`2m` weight vector is shared across concepts.
    fn shared_scorer(&mut self, pos: NodeId, neg: NodeId, et: NodeId) -> NodeId {
        let m = self.cfg.embed_dim;
        let vs = self.p("scorer/w");
        let v_pos = self.g.slice(vs, 0, m);
        let v_neg = self.g.slice(vs, m, 2 * m);
        let vp = self.tile_k(v_pos);
        let vn = self.tile_k(v_neg);
        let mp = self.g.mul(pos, vp);
        let sp = self.g.matmul(mp, et);
        let mn = self.g.mul(neg, vn);
        let sn = self.g.matmul(mn, et);
        self.g.add(sp, sn)
    }
}

/// Wires the graph for `config` around the given parameter set. The caller
/// has already validated the parameter names and shapes against
/// [`super::param_table`].
pub(super) fn build(
    config: &ModelConfig,
    params: &IndexMap<String, Array>,
) -> Result<ModelGraph, ModelError> {
    let mut ctx = Ctx::new(config, params);
    let x = ctx.g.input(INPUT_X);
    let int_mask = ctx.g.input(INPUT_INT_MASK);
    let int_values = ctx.g.input(INPUT_INT_VALUES);
    let use_cal = ctx.g.input(INPUT_USE_CAL);
    let h = ctx.backbone(x);

    let mg = match config.kind {
        ModelKind::MixCem => {
            let drop_mask = ctx.g.input(INPUT_DROP_MASK);
            let c_prior = ctx.g.input(INPUT_C_PRIOR);
            let (e, et) = ctx.expander();
            let pos_embed = ctx.p("concepts/pos_embed");
            let neg_embed = ctx.p("concepts/neg_embed");
            let r_pos = ctx.linear(h, "concepts/pos_residual");
            let r_neg = ctx.linear(h, "concepts/neg_residual");

            // The score path sees the raw residuals: no dropout, no gate.
            let pos_base = ctx.g.add(r_pos, pos_embed);
            let neg_base = ctx.g.add(r_neg, neg_embed);
            let z = ctx.shared_scorer(pos_base, neg_base, et);
            ctx.g.label(z, "concept_logits");
            let p_hat = ctx.concept_probs(z, use_cal);
            ctx.g.label(p_hat, "concept_probs");
            let ent = ctx.entropy(p_hat);
            ctx.g.label(ent, "concept_entropy");

            // Embedding path: residuals pass through the confidence gate
            // and the dropout mask. The gate always reads the model's own
            // predicted probability — interventions never touch it.
            let g_eff = if config.entropy_gate {
                let gate = ctx.one_minus(ent);
                ctx.g.mul(gate, drop_mask)
            } else {
                drop_mask
            };
            let g_exp = ctx.g.matmul(g_eff, e);
            let rp_gated = ctx.g.mul(r_pos, g_exp);
            let c_pos = ctx.g.add(rp_gated, pos_embed);
            let rn_gated = ctx.g.mul(r_neg, g_exp);
            let c_neg = ctx.g.add(rn_gated, neg_embed);

            let q = ctx.intervene(p_hat, int_mask, int_values);
            ctx.g.label(q, "q_mix");
            let q_exp = ctx.g.matmul(q, e);
            let q1m = ctx.one_minus(q);
            let q1m_exp = ctx.g.matmul(q1m, e);
            let mix_pos = ctx.g.mul(q_exp, c_pos);
            let mix_neg = ctx.g.mul(q1m_exp, c_neg);
            let bottleneck = ctx.g.add(mix_pos, mix_neg);
            ctx.g.label(bottleneck, "bottleneck");
            let logits = ctx.linear(bottleneck, "head");
            ctx.g.label(logits, "logits");
            let probs = ctx.g.softmax(logits);
            ctx.g.label(probs, "probs");

            // Prior path: global embeddings mixed by externally supplied
            // concepts, scored by the shared head. Identical arithmetic to
            // the main path when the residual contribution vanishes.
            let cp_exp = ctx.g.matmul(c_prior, e);
            let cp1m = ctx.one_minus(c_prior);
            let cp1m_exp = ctx.g.matmul(cp1m, e);
            let pr_pos = ctx.g.mul(cp_exp, pos_embed);
            let pr_neg = ctx.g.mul(cp1m_exp, neg_embed);
            let prior_bneck = ctx.g.add(pr_pos, pr_neg);
            ctx.g.label(prior_bneck, "prior_bottleneck");
            let prior_logits = ctx.linear(prior_bneck, "head");
            ctx.g.label(prior_logits, "prior_logits");
            let prior_probs = ctx.g.softmax(prior_logits);
            ctx.g.label(prior_probs, "prior_probs");

            ModelGraph {
                graph: ctx.g,
                x,
                int_mask,
                int_values,
                drop_mask: Some(drop_mask),
                c_prior: Some(c_prior),
                use_cal,
                concept_logits: z,
                concept_probs: p_hat,
                entropy: ent,
                q_mix: q,
                ctx_pos: Some(c_pos),
                ctx_neg: Some(c_neg),
                bottleneck,
                logits,
                probs,
                prior_bottleneck: Some(prior_bneck),
                prior_logits: Some(prior_logits),
                prior_probs: Some(prior_probs),
            }
        }
        ModelKind::VanillaCbm | ModelKind::HybridCbm => {
            let z = ctx.linear(h, "concepts");
            ctx.g.label(z, "concept_logits");
            let p_hat = ctx.concept_probs(z, use_cal);
            ctx.g.label(p_hat, "concept_probs");
            let ent = ctx.entropy(p_hat);
            ctx.g.label(ent, "concept_entropy");
            let q = ctx.intervene(p_hat, int_mask, int_values);
            ctx.g.label(q, "q_mix");
            // The hybrid variant appends an unsupervised channel that the
            // intervention override cannot reach; with zero unaligned units
            // it degenerates to the vanilla model, graph and all.
            let bottleneck = if config.kind == ModelKind::HybridCbm && config.n_unaligned > 0 {
                let u_lin = ctx.linear(h, "unaligned");
                let u = ctx.g.leaky_relu(u_lin, config.leaky_slope);
                ctx.g.concat(&[q, u])
            } else {
                q
            };
            ctx.g.label(bottleneck, "bottleneck");
            let logits = ctx.linear(bottleneck, "head");
            ctx.g.label(logits, "logits");
            let probs = ctx.g.softmax(logits);
            ctx.g.label(probs, "probs");
            ModelGraph {
                graph: ctx.g,
                x,
                int_mask,
                int_values,
                drop_mask: None,
                c_prior: None,
                use_cal,
                concept_logits: z,
                concept_probs: p_hat,
                entropy: ent,
                q_mix: q,
                ctx_pos: None,
                ctx_neg: None,
                bottleneck,
                logits,
                probs,
                prior_bottleneck: None,
                prior_logits: None,
                prior_probs: None,
            }
        }
        ModelKind::Cem => {
            let (e, et) = ctx.expander();
            let slope = config.leaky_slope;
            let pp_lin = ctx.linear(h, "concepts/pos_proj");
            let phi_pos = ctx.g.leaky_relu(pp_lin, slope);
            let pn_lin = ctx.linear(h, "concepts/neg_proj");
            let phi_neg = ctx.g.leaky_relu(pn_lin, slope);
            let z = ctx.shared_scorer(phi_pos, phi_neg, et);
            ctx.g.label(z, "concept_logits");
            let p_hat = ctx.concept_probs(z, use_cal);
            ctx.g.label(p_hat, "concept_probs");
            let ent = ctx.entropy(p_hat);
            ctx.g.label(ent, "concept_entropy");
            let q = ctx.intervene(p_hat, int_mask, int_values);
            ctx.g.label(q, "q_mix");
            let q_exp = ctx.g.matmul(q, e);
            let q1m = ctx.one_minus(q);
            let q1m_exp = ctx.g.matmul(q1m, e);
            let mix_pos = ctx.g.mul(q_exp, phi_pos);
            let mix_neg = ctx.g.mul(q1m_exp, phi_neg);
            let bottleneck = ctx.g.add(mix_pos, mix_neg);
            ctx.g.label(bottleneck, "bottleneck");
            let logits = ctx.linear(bottleneck, "head");
            ctx.g.label(logits, "logits");
            let probs = ctx.g.softmax(logits);
            ctx.g.label(probs, "probs");
            ModelGraph {
                graph: ctx.g,
                x,
                int_mask,
                int_values,
                drop_mask: None,
                c_prior: None,
                use_cal,
                concept_logits: z,
                concept_probs: p_hat,
                entropy: ent,
                q_mix: q,
                ctx_pos: Some(phi_pos),
                ctx_neg: Some(phi_neg),
                bottleneck,
                logits,
                probs,
                prior_bottleneck: None,
                prior_logits: None,
                prior_probs: None,
            }
        }
    };
    Ok(mg)
}
