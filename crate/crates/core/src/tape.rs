//! Scalar reverse-mode differentiation over a flat, append-only tape.
//!
//! A [`TapeBuilder`] records elementary operations; [`TapeBuilder::finish`]
//! validates the recording and freezes it into an immutable [`Tape`]. Node
//! ids are handed out in insertion order, so every operand of node `k` has an
//! id smaller than `k` and the tape is topologically sorted by construction.
//!
//! Evaluation is split in two: [`Tape::forward`] produces an [`Evaluation`]
//! from parameter and input values, and [`Tape::backward`] turns an
//! evaluation into a sparse [`Gradient`] over the trainable parameters that
//! appear on the tape. Because the tape itself is never mutated, one tape can
//! be evaluated from many threads at once.
//!
//! Subgradients at kinks: `relu` and `relu1` pass no gradient at their
//! boundary points, and `max` routes the whole gradient to the
//! lowest-index maximizer.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamId;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("node {node} references operand {operand} which does not precede it")]
    ForwardReference { node: usize, operand: usize },
    #[error("node {node}: {reason}")]
    InvalidOp { node: usize, reason: String },
    #[error("expected {expected} input values, got {got}")]
    InputArity { expected: usize, got: usize },
    #[error("parameter {0} has no value (store holds {1} parameters)")]
    MissingParam(usize, usize),
    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: usize, value: f64 },
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("evaluation was produced by a different tape")]
    ForeignEvaluation,
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
}

/// Elementary operations. Every operation is scalar-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Value supplied by the caller at evaluation time.
    Input(usize),
    /// Trainable parameter read from the parameter vector.
    Param(ParamId),
    Const(f64),
    /// `bias + Σ cᵢ·xᵢ` with constant coefficients.
    Linear { terms: Vec<(NodeId, f64)>, bias: f64 },
    /// `Σ aᵢ·bᵢ` over node pairs.
    Dot(Vec<(NodeId, NodeId)>),
    Mul(NodeId, NodeId),
    /// `max(0, x)`
    Relu(NodeId),
    /// `max(0, min(1, x))`
    Relu1(NodeId),
    Max(Vec<NodeId>),
    Exp(NodeId),
    LogSumExp(Vec<NodeId>),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => Vec::new(),
            Op::Linear { terms, .. } => terms.iter().map(|(n, _)| *n).collect(),
            Op::Dot(pairs) => pairs.iter().flat_map(|(a, b)| [*a, *b]).collect(),
            Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(a) | Op::Relu1(a) | Op::Exp(a) => vec![*a],
            Op::Max(xs) | Op::LogSumExp(xs) => xs.clone(),
        }
    }
}

/// Records operations. Operand errors are latched and reported by
/// [`TapeBuilder::finish`], so construction code can chain calls freely.
#[derive(Debug, Default)]
pub struct TapeBuilder {
    nodes: Vec<Op>,
    num_inputs: usize,
    param_nodes: BTreeMap<ParamId, NodeId>,
    error: Option<TapeError>,
}

impl TapeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends an arbitrary op, checking that its operands already exist.
    pub fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        if self.error.is_none() {
            if let Err(e) = validate(id, &op) {
                self.error = Some(e);
            }
        }
        self.nodes.push(op);
        NodeId(id)
    }

    /// A fresh input slot; its value is the `k`-th entry of the input slice
    /// passed to [`Tape::forward`].
    pub fn input(&mut self) -> NodeId {
        let slot = self.num_inputs;
        self.num_inputs += 1;
        self.push(Op::Input(slot))
    }

    /// The node reading parameter `pid`. Repeated calls return the same node.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&pid) {
            return n;
        }
        let n = self.push(Op::Param(pid));
        self.param_nodes.insert(pid, n);
        n
    }

    pub fn constant(&mut self, c: f64) -> NodeId {
        self.push(Op::Const(c))
    }

    pub fn linear(&mut self, terms: Vec<(NodeId, f64)>, bias: f64) -> NodeId {
        self.push(Op::Linear { terms, bias })
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.linear(xs.iter().map(|&x| (x, 1.0)).collect(), 0.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.linear(vec![(a, 1.0), (b, -1.0)], 0.0)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.linear(vec![(a, c)], 0.0)
    }

    /// `1 − x`
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.linear(vec![(a, -1.0)], 1.0)
    }

    pub fn dot(&mut self, pairs: Vec<(NodeId, NodeId)>) -> NodeId {
        self.push(Op::Dot(pairs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn relu1(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu1(a))
    }

    pub fn max(&mut self, xs: Vec<NodeId>) -> NodeId {
        if xs.len() == 1 {
            return xs[0];
        }
        self.push(Op::Max(xs))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log_sum_exp(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(Op::LogSumExp(xs))
    }

    /// Softmax components `exp(xᵢ − logsumexp(x))`.
    pub fn softmax(&mut self, xs: &[NodeId]) -> Vec<NodeId> {
        let lse = self.log_sum_exp(xs.to_vec());
        xs.iter()
            .map(|&x| {
                let shifted = self.sub(x, lse);
                self.exp(shifted)
            })
            .collect()
    }

    pub fn finish(self) -> Result<Tape, TapeError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        Ok(Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes,
            num_inputs: self.num_inputs,
            params: self.param_nodes.into_iter().collect(),
        })
    }
}

fn validate(id: usize, op: &Op) -> Result<(), TapeError> {
    for operand in op.operands() {
        if operand.0 >= id {
            return Err(TapeError::ForwardReference {
                node: id,
                operand: operand.0,
            });
        }
    }
    let invalid = |reason: &str| {
        Err(TapeError::InvalidOp {
            node: id,
            reason: reason.to_string(),
        })
    };
    match op {
        Op::Const(c) if !c.is_finite() => invalid("non-finite constant"),
        Op::Linear { terms, bias } => {
            if !bias.is_finite() || terms.iter().any(|(_, c)| !c.is_finite()) {
                invalid("non-finite coefficient")
            } else {
                Ok(())
            }
        }
        Op::Max(xs) | Op::LogSumExp(xs) if xs.is_empty() => invalid("empty operand list"),
        _ => Ok(()),
    }
}

/// An immutable, topologically ordered computation graph.
#[derive(Debug, Clone)]
pub struct Tape {
    id: u64,
    nodes: Vec<Op>,
    num_inputs: usize,
    params: Vec<(ParamId, NodeId)>,
}

/// Forward values of every node on one tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    tape_id: u64,
    values: Vec<f64>,
}

impl Evaluation {
    pub fn value(&self, node: NodeId) -> f64 {
        self.values[node.0]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Partial derivatives for the trainable parameters read by a tape.
///
/// Every parameter on the tape has exactly one entry, even when its
/// derivative is zero; parameters absent from the tape have none.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradient {
    entries: Vec<(ParamId, f64)>,
}

impl Gradient {
    pub fn get(&self, pid: ParamId) -> Option<f64> {
        self.entries
            .binary_search_by_key(&pid, |(p, _)| *p)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` into `self`, merging on parameter id.
    pub fn accumulate(&mut self, other: &Gradient) {
        let mut merged: BTreeMap<ParamId, f64> = self.entries.iter().copied().collect();
        for (p, g) in other.iter() {
            *merged.entry(p).or_insert(0.0) += g;
        }
        self.entries = merged.into_iter().collect();
    }
}

impl Tape {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0]
    }

    /// All operations in evaluation order.
    pub fn ops(&self) -> &[Op] {
        &self.nodes
    }

    /// Trainable parameters read by this tape, ordered by id.
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.iter().map(|(p, _)| *p)
    }

    pub fn forward(&self, params: &[f64], inputs: &[f64]) -> Result<Evaluation, TapeError> {
        if inputs.len() != self.num_inputs {
            return Err(TapeError::InputArity {
                expected: self.num_inputs,
                got: inputs.len(),
            });
        }
        let mut values = Vec::with_capacity(self.nodes.len());
        for (k, op) in self.nodes.iter().enumerate() {
            let v = match op {
                Op::Input(slot) => inputs[*slot],
                Op::Param(pid) => *params
                    .get(pid.0)
                    .ok_or(TapeError::MissingParam(pid.0, params.len()))?,
                Op::Const(c) => *c,
                Op::Linear { terms, bias } => {
                    bias + terms.iter().map(|(n, c)| c * values[n.0]).sum::<f64>()
                }
                Op::Dot(pairs) => pairs.iter().map(|(a, b)| values[a.0] * values[b.0]).sum(),
                Op::Mul(a, b) => values[a.0] * values[b.0],
                Op::Relu(a) => f64::max(values[a.0], 0.0),
                Op::Relu1(a) => values[a.0].clamp(0.0, 1.0),
                Op::Max(xs) => xs.iter().map(|n| values[n.0]).fold(f64::NEG_INFINITY, f64::max),
                Op::Exp(a) => values[a.0].exp(),
                Op::LogSumExp(xs) => {
                    let m = xs.iter().map(|n| values[n.0]).fold(f64::NEG_INFINITY, f64::max);
                    m + xs.iter().map(|n| (values[n.0] - m).exp()).sum::<f64>().ln()
                }
            };
            if !v.is_finite() {
                return Err(TapeError::NonFinite { node: k, value: v });
            }
            values.push(v);
        }
        Ok(Evaluation {
            tape_id: self.id,
            values,
        })
    }

    /// Gradient of the scalar `loss` node.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradient, TapeError> {
        self.backward_seeded(eval, &[(loss, 1.0)])
    }

    /// Gradient of `Σ seedᵢ · nodeᵢ`. This lets a caller compute a loss
    /// outside the tape and feed back `∂loss/∂output` for each output.
    pub fn backward_seeded(
        &self,
        eval: &Evaluation,
        seeds: &[(NodeId, f64)],
    ) -> Result<Gradient, TapeError> {
        if eval.tape_id != self.id {
            return Err(TapeError::ForeignEvaluation);
        }
        let values = &eval.values;
        let mut adj = vec![0.0; self.nodes.len()];
        let mut top = 0;
        for &(n, s) in seeds {
            if n.0 >= self.nodes.len() {
                return Err(TapeError::UnknownNode(n.0));
            }
            adj[n.0] += s;
            top = top.max(n.0 + 1);
        }
        for k in (0..top).rev() {
            let g = adj[k];
            if g == 0.0 {
                continue;
            }
            match &self.nodes[k] {
                Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
                Op::Linear { terms, .. } => {
                    for (n, c) in terms {
                        adj[n.0] += c * g;
                    }
                }
                Op::Dot(pairs) => {
                    for (a, b) in pairs {
                        adj[a.0] += values[b.0] * g;
                        adj[b.0] += values[a.0] * g;
                    }
                }
                Op::Mul(a, b) => {
                    adj[a.0] += values[b.0] * g;
                    adj[b.0] += values[a.0] * g;
                }
                Op::Relu(a) => {
                    if values[a.0] > 0.0 {
                        adj[a.0] += g;
                    }
                }
                Op::Relu1(a) => {
                    let x = values[a.0];
                    if x > 0.0 && x < 1.0 {
                        adj[a.0] += g;
                    }
                }
                Op::Max(xs) => {
                    let y = values[k];
                    if let Some(arg) = xs.iter().find(|n| values[n.0] == y) {
                        adj[arg.0] += g;
                    }
                }
                Op::Exp(a) => adj[a.0] += values[k] * g,
                Op::LogSumExp(xs) => {
                    let y = values[k];
                    for n in xs {
                        adj[n.0] += (values[n.0] - y).exp() * g;
                    }
                }
            }
        }
        Ok(Gradient {
            entries: self.params.iter().map(|(p, n)| (*p, adj[n.0])).collect(),
        })
    }

    /// Smallest distance of any piecewise-linear op from one of its kinks
    /// under `eval`: relu arguments from 0, relu1 arguments from 0 and 1,
    /// and the gap between the two largest operands of every max.
    pub fn kink_margin(&self, eval: &Evaluation) -> f64 {
        let v = &eval.values;
        let mut margin = f64::INFINITY;
        for op in &self.nodes {
            let m = match op {
                Op::Relu(a) => v[a.0].abs(),
                Op::Relu1(a) => v[a.0].abs().min((v[a.0] - 1.0).abs()),
                Op::Max(xs) => {
                    let mut top = [f64::NEG_INFINITY; 2];
                    for n in xs {
                        let x = v[n.0];
                        if x > top[0] {
                            top = [x, top[0]];
                        } else if x > top[1] {
                            top[1] = x;
                        }
                    }
                    top[0] - top[1]
                }
                _ => continue,
            };
            margin = margin.min(m);
        }
        margin
    }
}

/// Forward/backward pairing that enforces call order.
#[derive(Debug)]
pub struct Session<'t> {
    tape: &'t Tape,
    eval: Option<Evaluation>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self { tape, eval: None }
    }

    pub fn forward(&mut self, params: &[f64], inputs: &[f64]) -> Result<&Evaluation, TapeError> {
        self.eval = Some(self.tape.forward(params, inputs)?);
        Ok(self.eval.as_ref().expect("just set"))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradient, TapeError> {
        let eval = self.eval.as_ref().ok_or(TapeError::NotEvaluated)?;
        self.tape.backward(eval, loss)
    }
}
