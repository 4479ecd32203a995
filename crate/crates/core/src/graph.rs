//! Reverse-mode value graph.
//!
//! Models and losses are expressed as small directed graphs over
//! [`DenseArray`] values. A graph is built once per batch from a fixed
//! primitive set, evaluated forward as a pure function of its bindings, and
//! differentiated by a reverse sweep that accumulates adjoints for every
//! trainable leaf. There is no implicit state: parameters live in the graph
//! as named leaves, inputs are bound by name at evaluation time, and
//! evaluating twice with the same bindings is bit-identical.
//!
//! Broadcasting is limited to a leading batch axis: a rank-1 vector of width
//! `n` may combine elementwise with a rank-2 `[B, n]` array. Everything else
//! must match shapes exactly, and every computed node is checked to be
//! finite, so a NaN or overflow is reported at the node that produced it
//! rather than three modules later.

use crate::scalar::{lit, Scalar};
use crate::tensor::{DenseArray, TensorError};
use indexmap::IndexMap;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },
    #[error("input leaf `{name}` is required by this evaluation but not bound")]
    UnboundInput { name: String },
    #[error("node `{node}` was not computed in this evaluation")]
    NotEvaluated { node: String },
    #[error("loss node `{node}` has {numel} elements; backward needs a scalar")]
    LossNotScalar { node: String, numel: usize },
    #[error("evaluation holds {eval_nodes} slots but the graph has {graph_nodes} nodes")]
    EvaluationMismatch {
        eval_nodes: usize,
        graph_nodes: usize,
    },
    #[error("no parameter named `{name}` in this graph")]
    UnknownParam { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    /// Non-trainable leaf bound by name at evaluation time.
    Input,
    /// Trainable leaf; its value is stored in the graph.
    Param,
    /// Fixed leaf baked in at construction.
    Const,
    /// Rank-2 matrix product `[p, q] x [q, r] -> [p, r]`.
    MatMul { lhs: NodeId, rhs: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    /// Elementwise product; same broadcast rule as `Add`.
    Mul { lhs: NodeId, rhs: NodeId },
    Neg { input: NodeId },
    Exp { input: NodeId },
    Ln { input: NodeId },
    Sigmoid { input: NodeId },
    /// Softmax over the last axis, computed with a per-row max shift.
    Softmax { input: NodeId },
    LeakyRelu { input: NodeId, slope: S },
    /// Concatenation along the last axis. The same node may appear more than
    /// once; its adjoint then accumulates.
    Concat { inputs: Vec<NodeId> },
    /// Sum over the last axis, keeping it as extent 1.
    RowSum { input: NodeId },
    /// Mean over all elements, yielding a `[1]` scalar.
    Mean { input: NodeId },
    /// `[.., start..end)` along the last axis.
    Slice {
        input: NodeId,
        start: usize,
        end: usize,
    },
    /// Identity forward; blocks all gradient flow.
    StopGradient { input: NodeId },
    /// `value * mask` elementwise, with gradient flowing only to `value`
    /// (masked positions get exactly zero). An all-ones mask is the identity
    /// for both value and gradient.
    SelectMask { value: NodeId, mask: NodeId },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    name: String,
    op: Op<S>,
    /// Stored value for `Param` and `Const` leaves.
    stored: Option<DenseArray<S>>,
}

/// Values bound to input leaves for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings<S: Scalar> {
    map: HashMap<String, DenseArray<S>>,
}

impl<S: Scalar> Bindings<S> {
    pub fn new() -> Self {
        Self {
            map: HashMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: DenseArray<S>) -> &mut Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray<S>> {
        self.map.get(name)
    }
}

/// Result of a forward pass: one value slot per graph node, filled for every
/// node the evaluation touched.
#[derive(Debug, Clone)]
pub struct Evaluation<S: Scalar> {
    values: Vec<Option<DenseArray<S>>>,
}

impl<S: Scalar> Evaluation<S> {
    /// Value of a computed node; panics if the node was outside the
    /// evaluated subgraph (use [`Evaluation::try_value`] to probe).
    pub fn value(&self, id: NodeId) -> &DenseArray<S> {
        self.values[id.0]
            .as_ref()
            .expect("node was not computed in this evaluation")
    }

    pub fn try_value(&self, id: NodeId) -> Option<&DenseArray<S>> {
        self.values.get(id.0).and_then(|v| v.as_ref())
    }

    pub fn scalar(&self, id: NodeId) -> S {
        let v = self.value(id);
        debug_assert!(v.is_scalar());
        v.data()[0]
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf, keyed by
/// parameter name in creation order. Parameters with no path to the loss
/// (including paths severed by stop-gradient) hold exact zeros.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    by_name: IndexMap<String, DenseArray<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&DenseArray<S>> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<S>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

/// Outcome of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct GradCheck<S: Scalar> {
    /// Largest relative error over every parameter coordinate, with the
    /// denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: S,
    /// Coordinate realizing the maximum, when any coordinate was checked.
    pub worst: Option<GradCheckWorst<S>>,
}

#[derive(Debug, Clone)]
pub struct GradCheckWorst<S: Scalar> {
    pub node: String,
    pub index: usize,
    pub analytic: S,
    pub numeric: S,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    leaf_names: HashMap<String, NodeId>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_names: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    /// Replaces the auto-generated name of a node; handy for readable error
    /// messages out of model graphs.
    pub fn label(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].name = name.to_string();
    }

    fn push(&mut self, name: String, op: Op<S>, stored: Option<DenseArray<S>>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name, op, stored });
        id
    }

    fn auto(&self, op: &str) -> String {
        format!("{}#{}", op, self.nodes.len())
    }

    fn register_leaf(&mut self, name: &str, id: NodeId) {
        let prev = self.leaf_names.insert(name.to_string(), id);
        assert!(prev.is_none(), "duplicate leaf name `{name}`");
    }

    /// Non-trainable leaf bound at evaluation time.
    pub fn input(&mut self, name: &str) -> NodeId {
        let id = self.push(name.to_string(), Op::Input, None);
        self.register_leaf(name, id);
        id
    }

    /// Trainable leaf with its current value.
    pub fn param(&mut self, name: &str, value: DenseArray<S>) -> NodeId {
        let id = self.push(name.to_string(), Op::Param, Some(value));
        self.register_leaf(name, id);
        id
    }

    /// Fixed value baked into the graph.
    pub fn constant(&mut self, value: DenseArray<S>) -> NodeId {
        let name = self.auto("const");
        self.push(name, Op::Const, Some(value))
    }

    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let name = self.auto("matmul");
        self.push(name, Op::MatMul { lhs, rhs }, None)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let name = self.auto("add");
        self.push(name, Op::Add { lhs, rhs }, None)
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> NodeId {
        let name = self.auto("mul");
        self.push(name, Op::Mul { lhs, rhs }, None)
    }

    pub fn neg(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("neg");
        self.push(name, Op::Neg { input }, None)
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("exp");
        self.push(name, Op::Exp { input }, None)
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("ln");
        self.push(name, Op::Ln { input }, None)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("sigmoid");
        self.push(name, Op::Sigmoid { input }, None)
    }

    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("softmax");
        self.push(name, Op::Softmax { input }, None)
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: S) -> NodeId {
        let name = self.auto("leaky_relu");
        self.push(name, Op::LeakyRelu { input, slope }, None)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "concat of zero nodes");
        let name = self.auto("concat");
        self.push(
            name,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            None,
        )
    }

    pub fn row_sum(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("row_sum");
        self.push(name, Op::RowSum { input }, None)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("mean");
        self.push(name, Op::Mean { input }, None)
    }

    pub fn slice(&mut self, input: NodeId, start: usize, end: usize) -> NodeId {
        let name = self.auto("slice");
        self.push(name, Op::Slice { input, start, end }, None)
    }

    pub fn stop_gradient(&mut self, input: NodeId) -> NodeId {
        let name = self.auto("stop_gradient");
        self.push(name, Op::StopGradient { input }, None)
    }

    pub fn select_mask(&mut self, value: NodeId, mask: NodeId) -> NodeId {
        let name = self.auto("select_mask");
        self.push(name, Op::SelectMask { value, mask }, None)
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param))
            .map(|n| n.name.as_str())
            .collect()
    }

    /// Id of the registered leaf (input or parameter) with this name.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaf_names.get(name).copied()
    }

    pub fn param_value(&self, name: &str) -> Option<&DenseArray<S>> {
        let id = *self.leaf_names.get(name)?;
        match self.nodes[id.0].op {
            Op::Param => self.nodes[id.0].stored.as_ref(),
            _ => None,
        }
    }

    pub fn set_param(&mut self, name: &str, value: DenseArray<S>) -> Result<(), GraphError> {
        let id = *self
            .leaf_names
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam {
                name: name.to_string(),
            })?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param) {
            return Err(GraphError::UnknownParam {
                name: name.to_string(),
            });
        }
        let current = node.stored.as_ref().expect("param holds a value");
        if current.shape() != value.shape() {
            return Err(GraphError::ShapeMismatch {
                node: node.name.clone(),
                detail: format!(
                    "set_param shape {:?} does not match stored {:?}",
                    value.shape(),
                    current.shape()
                ),
            });
        }
        node.stored = Some(value);
        Ok(())
    }

    fn visit_inputs(op: &Op<S>, mut f: impl FnMut(NodeId)) {
        match op {
            Op::Input | Op::Param | Op::Const => {}
            Op::MatMul { lhs, rhs } | Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } => {
                f(*lhs);
                f(*rhs);
            }
            Op::Neg { input }
            | Op::Exp { input }
            | Op::Ln { input }
            | Op::Sigmoid { input }
            | Op::Softmax { input }
            | Op::LeakyRelu { input, .. }
            | Op::RowSum { input }
            | Op::Mean { input }
            | Op::Slice { input, .. }
            | Op::StopGradient { input } => f(*input),
            Op::Concat { inputs } => {
                for id in inputs {
                    f(*id);
                }
            }
            Op::SelectMask { value, mask } => {
                f(*value);
                f(*mask);
            }
        }
    }

    fn needed_set(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = targets.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id.0] {
                continue;
            }
            needed[id.0] = true;
            Self::visit_inputs(&self.nodes[id.0].op, |inp| {
                if !needed[inp.0] {
                    stack.push(inp);
                }
            });
        }
        needed
    }

    /// Evaluates every node of the graph.
    pub fn evaluate(&self, bindings: &Bindings<S>) -> Result<Evaluation<S>, GraphError> {
        let all: Vec<NodeId> = (0..self.nodes.len()).map(NodeId).collect();
        self.evaluate_nodes(bindings, &all)
    }

    /// Evaluates the ancestor closure of `targets` in construction order.
    /// Inputs outside that closure may stay unbound.
    pub fn evaluate_nodes(
        &self,
        bindings: &Bindings<S>,
        targets: &[NodeId],
    ) -> Result<Evaluation<S>, GraphError> {
        let needed = self.needed_set(targets);
        let mut values: Vec<Option<DenseArray<S>>> = vec![None; self.nodes.len()];
        for idx in 0..self.nodes.len() {
            if !needed[idx] {
                continue;
            }
            let value = self.compute_node(idx, &values, bindings)?;
            if value.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite {
                    node: self.nodes[idx].name.clone(),
                });
            }
            values[idx] = Some(value);
        }
        Ok(Evaluation { values })
    }

    fn shape_err(&self, idx: usize, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes[idx].name.clone(),
            detail,
        }
    }

    fn compute_node(
        &self,
        idx: usize,
        values: &[Option<DenseArray<S>>],
        bindings: &Bindings<S>,
    ) -> Result<DenseArray<S>, GraphError> {
        let node = &self.nodes[idx];
        let val = |id: NodeId| values[id.0].as_ref().expect("topological order");
        let out = match &node.op {
            Op::Input => bindings
                .get(&node.name)
                .ok_or_else(|| GraphError::UnboundInput {
                    name: node.name.clone(),
                })?
                .clone(),
            Op::Param | Op::Const => node.stored.as_ref().expect("leaf holds a value").clone(),
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(self.shape_err(
                        idx,
                        format!(
                            "matmul needs rank-2 operands, got {:?} x {:?}",
                            a.shape(),
                            b.shape()
                        ),
                    ));
                }
                if a.shape()[1] != b.shape()[0] {
                    return Err(self.shape_err(
                        idx,
                        format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
                    ));
                }
                matmul(a, b)
            }
            Op::Add { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                self.broadcast_zip(idx, a, b, |x, y| x + y)?
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                self.broadcast_zip(idx, a, b, |x, y| x * y)?
            }
            Op::Neg { input } => val(*input).map(|v| -v),
            Op::Exp { input } => val(*input).map(|v| v.exp()),
            Op::Ln { input } => val(*input).map(|v| v.ln()),
            Op::Sigmoid { input } => val(*input).map(sigmoid),
            Op::Softmax { input } => {
                let x = val(*input);
                if x.cols() == 0 {
                    return Err(self.shape_err(idx, "softmax over zero columns".into()));
                }
                softmax_rows(x)
            }
            Op::LeakyRelu { input, slope } => {
                let s = *slope;
                val(*input).map(|v| if v > S::zero() { v } else { s * v })
            }
            Op::Concat { inputs } => {
                let vals: Vec<&DenseArray<S>> = inputs.iter().map(|id| val(*id)).collect();
                let rank = vals[0].rank();
                if vals.iter().any(|v| v.rank() != rank) {
                    return Err(self.shape_err(idx, "concat operands differ in rank".into()));
                }
                if rank == 1 {
                    let mut data = Vec::new();
                    for v in &vals {
                        data.extend_from_slice(v.data());
                    }
                    let n = data.len();
                    DenseArray::from_raw(vec![n], data)
                } else if rank == 2 {
                    let rows = vals[0].rows();
                    if vals.iter().any(|v| v.rows() != rows) {
                        return Err(
                            self.shape_err(idx, "concat operands differ in row count".into())
                        );
                    }
                    let total: usize = vals.iter().map(|v| v.cols()).sum();
                    let mut data = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for v in &vals {
                            data.extend_from_slice(v.row(r));
                        }
                    }
                    DenseArray::from_raw(vec![rows, total], data)
                } else {
                    return Err(self.shape_err(idx, format!("concat on rank-{rank} operands")));
                }
            }
            Op::RowSum { input } => {
                let x = val(*input);
                match x.rank() {
                    1 => {
                        let s = x.data().iter().copied().sum();
                        DenseArray::from_raw(vec![1], vec![s])
                    }
                    2 => {
                        let rows = x.rows();
                        let mut data = Vec::with_capacity(rows);
                        for r in 0..rows {
                            data.push(x.row(r).iter().copied().sum());
                        }
                        DenseArray::from_raw(vec![rows, 1], data)
                    }
                    r => return Err(self.shape_err(idx, format!("row_sum on rank-{r} operand"))),
                }
            }
            Op::Mean { input } => {
                let x = val(*input);
                if x.numel() == 0 {
                    return Err(self.shape_err(idx, "mean of empty array".into()));
                }
                let n = lit::<S>(x.numel() as f64);
                let s: S = x.data().iter().copied().sum();
                DenseArray::from_raw(vec![1], vec![s / n])
            }
            Op::Slice { input, start, end } => {
                let x = val(*input);
                let cols = x.cols();
                if *start >= *end || *end > cols {
                    return Err(self.shape_err(
                        idx,
                        format!("slice {start}..{end} out of bounds for width {cols}"),
                    ));
                }
                let width = end - start;
                match x.rank() {
                    1 => DenseArray::from_raw(vec![width], x.data()[*start..*end].to_vec()),
                    2 => {
                        let rows = x.rows();
                        let mut data = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            data.extend_from_slice(&x.row(r)[*start..*end]);
                        }
                        DenseArray::from_raw(vec![rows, width], data)
                    }
                    r => return Err(self.shape_err(idx, format!("slice on rank-{r} operand"))),
                }
            }
            Op::StopGradient { input } => val(*input).clone(),
            Op::SelectMask { value, mask } => {
                let (v, m) = (val(*value), val(*mask));
                if v.shape() != m.shape() {
                    return Err(self.shape_err(
                        idx,
                        format!(
                            "select_mask shapes differ: value {:?} vs mask {:?}",
                            v.shape(),
                            m.shape()
                        ),
                    ));
                }
                let data = v
                    .data()
                    .iter()
                    .zip(m.data())
                    .map(|(&x, &k)| x * k)
                    .collect();
                DenseArray::from_raw(v.shape().to_vec(), data)
            }
        };
        Ok(out)
    }

    fn broadcast_zip(
        &self,
        idx: usize,
        a: &DenseArray<S>,
        b: &DenseArray<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<DenseArray<S>, GraphError> {
        match broadcast_kind(a.shape(), b.shape()) {
            Some(Bcast::Same) => {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Ok(DenseArray::from_raw(a.shape().to_vec(), data))
            }
            Some(Bcast::RhsVec) => {
                let cols = b.numel();
                let bd = b.data();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % cols]))
                    .collect();
                Ok(DenseArray::from_raw(a.shape().to_vec(), data))
            }
            Some(Bcast::LhsVec) => {
                let cols = a.numel();
                let ad = a.data();
                let data = b
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(ad[i % cols], y))
                    .collect();
                Ok(DenseArray::from_raw(b.shape().to_vec(), data))
            }
            None => Err(self.shape_err(
                idx,
                format!(
                    "operands {:?} and {:?} are not broadcast-compatible",
                    a.shape(),
                    b.shape()
                ),
            )),
        }
    }

    /// Marks every node whose value influences some trainable parameter's
    /// gradient path. Stop-gradient nodes and the mask side of select-by-mask
    /// cut propagation.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for idx in 0..self.nodes.len() {
            needs[idx] = match &self.nodes[idx].op {
                Op::Param => true,
                Op::Input | Op::Const => false,
                Op::StopGradient { .. } => false,
                Op::SelectMask { value, .. } => needs[value.0],
                op => {
                    let mut any = false;
                    Self::visit_inputs(op, |inp| any |= needs[inp.0]);
                    any
                }
            };
        }
        needs
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient array per
    /// trainable leaf (zeros where no path reaches the loss).
    pub fn backward(
        &self,
        eval: &Evaluation<S>,
        loss: NodeId,
    ) -> Result<Gradients<S>, GraphError> {
        if eval.values.len() != self.nodes.len() {
            return Err(GraphError::EvaluationMismatch {
                eval_nodes: eval.values.len(),
                graph_nodes: self.nodes.len(),
            });
        }
        let loss_val = eval
            .values
            .get(loss.0)
            .and_then(|v| v.as_ref())
            .ok_or_else(|| GraphError::NotEvaluated {
                node: self.nodes[loss.0].name.clone(),
            })?;
        if loss_val.numel() != 1 {
            return Err(GraphError::LossNotScalar {
                node: self.nodes[loss.0].name.clone(),
                numel: loss_val.numel(),
            });
        }
        let needs = self.needs_grad();
        let mut adjoints: Vec<Option<DenseArray<S>>> = vec![None; self.nodes.len()];
        adjoints[loss.0] = Some(DenseArray::from_raw(
            loss_val.shape().to_vec(),
            vec![S::one()],
        ));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            if !needs[idx] {
                adjoints[idx] = Some(grad);
                continue;
            }
            self.propagate(idx, &grad, eval, &needs, &mut adjoints);
            adjoints[idx] = Some(grad);
        }

        let mut by_name = IndexMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let shape = node.stored.as_ref().expect("param holds a value").shape();
                let grad = adjoints[idx]
                    .take()
                    .unwrap_or_else(|| DenseArray::zeros(shape));
                by_name.insert(node.name.clone(), grad);
            }
        }
        Ok(Gradients { by_name })
    }

    fn propagate(
        &self,
        idx: usize,
        grad: &DenseArray<S>,
        eval: &Evaluation<S>,
        needs: &[bool],
        adjoints: &mut Vec<Option<DenseArray<S>>>,
    ) {
        let val = |id: NodeId| eval.values[id.0].as_ref().expect("ancestor was computed");
        let send = |id: NodeId, delta: DenseArray<S>, adjoints: &mut Vec<Option<DenseArray<S>>>| {
            if !needs[id.0] {
                return;
            }
            match &mut adjoints[id.0] {
                Some(acc) => {
                    debug_assert_eq!(acc.shape(), delta.shape());
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Input | Op::Param | Op::Const => {}
            Op::MatMul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                if needs[lhs.0] {
                    let bt = b.transpose2();
                    send(*lhs, matmul(grad, &bt), adjoints);
                }
                if needs[rhs.0] {
                    let at = a.transpose2();
                    send(*rhs, matmul(&at, grad), adjoints);
                }
            }
            Op::Add { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                match broadcast_kind(a.shape(), b.shape()).expect("checked in forward") {
                    Bcast::Same => {
                        send(*lhs, grad.clone(), adjoints);
                        send(*rhs, grad.clone(), adjoints);
                    }
                    Bcast::RhsVec => {
                        send(*lhs, grad.clone(), adjoints);
                        send(*rhs, col_sum(grad, b.numel()), adjoints);
                    }
                    Bcast::LhsVec => {
                        send(*lhs, col_sum(grad, a.numel()), adjoints);
                        send(*rhs, grad.clone(), adjoints);
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                match broadcast_kind(a.shape(), b.shape()).expect("checked in forward") {
                    Bcast::Same => {
                        if needs[lhs.0] {
                            send(*lhs, elementwise(grad, b, |g, y| g * y), adjoints);
                        }
                        if needs[rhs.0] {
                            send(*rhs, elementwise(grad, a, |g, x| g * x), adjoints);
                        }
                    }
                    Bcast::RhsVec => {
                        let cols = b.numel();
                        if needs[lhs.0] {
                            let bd = b.data();
                            let data = grad
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| g * bd[i % cols])
                                .collect();
                            send(
                                *lhs,
                                DenseArray::from_raw(grad.shape().to_vec(), data),
                                adjoints,
                            );
                        }
                        if needs[rhs.0] {
                            let prod = elementwise(grad, a, |g, x| g * x);
                            send(*rhs, col_sum(&prod, cols), adjoints);
                        }
                    }
                    Bcast::LhsVec => {
                        let cols = a.numel();
                        if needs[lhs.0] {
                            let prod = elementwise(grad, b, |g, y| g * y);
                            send(*lhs, col_sum(&prod, cols), adjoints);
                        }
                        if needs[rhs.0] {
                            let ad = a.data();
                            let data = grad
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(i, &g)| g * ad[i % cols])
                                .collect();
                            send(
                                *rhs,
                                DenseArray::from_raw(grad.shape().to_vec(), data),
                                adjoints,
                            );
                        }
                    }
                }
            }
            Op::Neg { input } => send(*input, grad.map(|g| -g), adjoints),
            Op::Exp { input } => {
                let out = eval.values[idx].as_ref().expect("own value");
                send(*input, elementwise(grad, out, |g, y| g * y), adjoints);
            }
            Op::Ln { input } => {
                let x = val(*input);
                send(*input, elementwise(grad, x, |g, v| g / v), adjoints);
            }
            Op::Sigmoid { input } => {
                let out = eval.values[idx].as_ref().expect("own value");
                send(
                    *input,
                    elementwise(grad, out, |g, s| g * s * (S::one() - s)),
                    adjoints,
                );
            }
            Op::Softmax { input } => {
                let out = eval.values[idx].as_ref().expect("own value");
                let cols = out.cols();
                let rows = out.numel() / cols;
                let mut data = vec![S::zero(); out.numel()];
                for r in 0..rows {
                    let s = &out.data()[r * cols..(r + 1) * cols];
                    let g = &grad.data()[r * cols..(r + 1) * cols];
                    let dot: S = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
                    for c in 0..cols {
                        data[r * cols + c] = s[c] * (g[c] - dot);
                    }
                }
                send(
                    *input,
                    DenseArray::from_raw(out.shape().to_vec(), data),
                    adjoints,
                );
            }
            Op::LeakyRelu { input, slope } => {
                let x = val(*input);
                let s = *slope;
                send(
                    *input,
                    elementwise(grad, x, |g, v| if v > S::zero() { g } else { g * s }),
                    adjoints,
                );
            }
            Op::Concat { inputs } => {
                let rank = val(inputs[0]).rank();
                let mut offset = 0;
                if rank == 1 {
                    for id in inputs {
                        let w = val(*id).numel();
                        let delta =
                            DenseArray::from_raw(vec![w], grad.data()[offset..offset + w].to_vec());
                        send(*id, delta, adjoints);
                        offset += w;
                    }
                } else {
                    let rows = grad.rows();
                    let total = grad.cols();
                    for id in inputs {
                        let w = val(*id).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            let row = &grad.data()[r * total..(r + 1) * total];
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        send(*id, DenseArray::from_raw(vec![rows, w], data), adjoints);
                        offset += w;
                    }
                }
            }
            Op::RowSum { input } => {
                let x = val(*input);
                match x.rank() {
                    1 => {
                        let g = grad.data()[0];
                        send(*input, DenseArray::full(x.shape(), g), adjoints);
                    }
                    _ => {
                        let cols = x.cols();
                        let mut data = Vec::with_capacity(x.numel());
                        for r in 0..x.rows() {
                            let g = grad.data()[r];
                            data.extend(std::iter::repeat(g).take(cols));
                        }
                        send(*input, DenseArray::from_raw(x.shape().to_vec(), data), adjoints);
                    }
                }
            }
            Op::Mean { input } => {
                let x = val(*input);
                let n = lit::<S>(x.numel() as f64);
                let g = grad.data()[0] / n;
                send(*input, DenseArray::full(x.shape(), g), adjoints);
            }
            Op::Slice { input, start, end } => {
                let x = val(*input);
                let mut delta = DenseArray::zeros(x.shape());
                let width = end - start;
                match x.rank() {
                    1 => {
                        delta.data_mut()[*start..*end].copy_from_slice(grad.data());
                    }
                    _ => {
                        let cols = x.cols();
                        for r in 0..x.rows() {
                            let grow = &grad.data()[r * width..(r + 1) * width];
                            delta.data_mut()[r * cols + start..r * cols + end]
                                .copy_from_slice(grow);
                        }
                    }
                }
                send(*input, delta, adjoints);
            }
            Op::StopGradient { .. } => {}
            Op::SelectMask { value, mask } => {
                let m = val(*mask);
                send(*value, elementwise(grad, m, |g, k| g * k), adjoints);
            }
        }
    }

    /// Audits the analytic gradients of `loss` against central finite
    /// differences over every trainable coordinate.
    pub fn check_gradients(
        &self,
        bindings: &Bindings<S>,
        loss: NodeId,
        epsilon: S,
    ) -> Result<GradCheck<S>, GraphError> {
        let eval = self.evaluate_nodes(bindings, &[loss])?;
        let grads = self.backward(&eval, loss)?;
        let mut probe = self.clone();
        let mut report = GradCheck {
            max_rel_error: S::zero(),
            worst: None,
        };
        let floor = lit::<S>(1e-8);
        let params: Vec<(usize, String)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, n)| (i, n.name.clone()))
            .collect();
        for (idx, name) in params {
            let count = self.nodes[idx].stored.as_ref().expect("param value").numel();
            let analytic = grads.get(&name).expect("gradient per param").clone();
            for j in 0..count {
                let orig = probe.nodes[idx].stored.as_ref().expect("param value").data()[j];
                let slot = probe.nodes[idx].stored.as_mut().expect("param value");
                slot.data_mut()[j] = orig + epsilon;
                let f_plus = probe.evaluate_nodes(bindings, &[loss])?.scalar(loss);
                let slot = probe.nodes[idx].stored.as_mut().expect("param value");
                slot.data_mut()[j] = orig - epsilon;
                let f_minus = probe.evaluate_nodes(bindings, &[loss])?.scalar(loss);
                let slot = probe.nodes[idx].stored.as_mut().expect("param value");
                slot.data_mut()[j] = orig;

                let numeric = (f_plus - f_minus) / (lit::<S>(2.0) * epsilon);
                let a = analytic.data()[j];
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some(GradCheckWorst {
                        node: name.clone(),
                        index: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }
}

enum Bcast {
    Same,
    /// rhs is a rank-1 vector broadcast across the rows of lhs.
    RhsVec,
    /// lhs is a rank-1 vector broadcast across the rows of rhs.
    LhsVec,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Some(Bcast::RhsVec);
    }
    if a.len() == 1 && b.len() == 2 && a[0] == b[1] {
        return Some(Bcast::LhsVec);
    }
    None
}

fn elementwise<S: Scalar>(
    a: &DenseArray<S>,
    b: &DenseArray<S>,
    f: impl Fn(S, S) -> S,
) -> DenseArray<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseArray::from_raw(a.shape().to_vec(), data)
}

fn col_sum<S: Scalar>(g: &DenseArray<S>, cols: usize) -> DenseArray<S> {
    let mut out = vec![S::zero(); cols];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % cols] += v;
    }
    DenseArray::from_raw(vec![cols], out)
}

fn matmul<S: Scalar>(a: &DenseArray<S>, b: &DenseArray<S>) -> DenseArray<S> {
    let (p, q) = (a.shape()[0], a.shape()[1]);
    let r = b.shape()[1];
    let mut out = vec![S::zero(); p * r];
    let ad = a.data();
    let bd = b.data();
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for l in 0..q {
            let aval = ad[i * q + l];
            if aval == S::zero() {
                continue;
            }
            let brow = &bd[l * r..(l + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
    DenseArray::from_raw(vec![p, r], out)
}

/// Overflow-safe logistic function; the scalar kernel behind the graph's
/// sigmoid node, shared so scalar-side reimplementations bit-match it.
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

fn softmax_rows<S: Scalar>(x: &DenseArray<S>) -> DenseArray<S> {
    let cols = x.cols();
    let rows = x.numel() / cols;
    let mut data = vec![S::zero(); x.numel()];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(row[0], S::max);
        let out = &mut data[r * cols..(r + 1) * cols];
        let mut total = S::zero();
        for (o, &v) in out.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            total += e;
        }
        for o in out.iter_mut() {
            *o = *o / total;
        }
    }
    DenseArray::from_raw(x.shape().to_vec(), data)
}
