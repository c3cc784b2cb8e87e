//! Real-valued logic operators.
//!
//! Plain functions (`lnn_and`, `lnn_or`, ...) evaluate an operator on
//! concrete numbers. The `*_node` functions emit the same computation onto a
//! [`TapeBuilder`] so it can be trained. The [`LeafCombiner`] and
//! [`Connective`] traits wrap both behind a name so networks can swap
//! implementations at runtime (see [`crate::registry`]).

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::polytope::{self, FoldedParams, PolytopeError, VertexEnumerator};
use crate::tape::{NodeId, TapeBuilder};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("alpha must lie in (1/2, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("expected {expected} operands, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("operator needs at least one operand")]
    Empty,
    #[error("parameter block for {0} is missing slot '{1}'")]
    MissingSlot(String, String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// Threshold separating low truth values `[0, 1−α]` from high ones `[α, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig(f64);

impl AlphaConfig {
    pub fn new(alpha: f64) -> Result<Self, OperatorError> {
        if alpha > 0.5 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(OperatorError::InvalidAlpha(alpha))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Bias and weights of one operator instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub beta: f64,
    pub weights: Vec<f64>,
}

impl OperatorParams {
    pub fn new(beta: f64, weights: Vec<f64>) -> Self {
        Self { beta, weights }
    }

    /// Largest violation of the conjunction constraints at `alpha`
    /// (non-positive when feasible).
    pub fn lnn_violation(&self, alpha: f64) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for &w in &self.weights {
            worst = worst.max(-w);
            worst = worst.max(self.beta - alpha * w - (1.0 - alpha));
        }
        let total: f64 = self.weights.iter().sum();
        worst.max(alpha - (self.beta - (1.0 - alpha) * total))
    }

    pub fn is_lnn_feasible(&self, alpha: f64, tol: f64) -> bool {
        self.lnn_violation(alpha) <= tol
    }
}

fn relu1(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn check_len(x: &[f64], params: &OperatorParams) -> Result<(), OperatorError> {
    if x.is_empty() {
        return Err(OperatorError::Empty);
    }
    if x.len() != params.weights.len() {
        return Err(OperatorError::DimensionMismatch {
            expected: params.weights.len(),
            got: x.len(),
        });
    }
    Ok(())
}

/// `relu1(β − Σ wᵢ(1 − xᵢ))`
pub fn lnn_and(x: &[f64], params: &OperatorParams) -> Result<f64, OperatorError> {
    check_len(x, params)?;
    let penalty: f64 = x
        .iter()
        .zip(&params.weights)
        .map(|(xi, wi)| wi * (1.0 - xi))
        .sum();
    Ok(relu1(params.beta - penalty))
}

/// `1 − lnn_and(1 − x)`
pub fn lnn_or(x: &[f64], params: &OperatorParams) -> Result<f64, OperatorError> {
    let negated: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    Ok(1.0 - lnn_and(&negated, params)?)
}

/// `1 − relu1(β − Σ w_P ψ_P)`
pub fn lnn_pred(psi: &[f64], params: &OperatorParams) -> Result<f64, OperatorError> {
    check_len(psi, params)?;
    let evidence: f64 = psi.iter().zip(&params.weights).map(|(p, w)| p * w).sum();
    Ok(1.0 - relu1(params.beta - evidence))
}

pub fn attention_combine(psi: &[f64], weights: &[f64]) -> Result<f64, OperatorError> {
    if psi.len() != weights.len() {
        return Err(OperatorError::DimensionMismatch {
            expected: weights.len(),
            got: psi.len(),
        });
    }
    Ok(psi.iter().zip(weights).map(|(p, w)| p * w).sum())
}

pub fn lnn_not(psi: f64) -> f64 {
    1.0 - psi
}

pub fn lukasiewicz_and(x: f64, y: f64) -> f64 {
    f64::max(0.0, x + y - 1.0)
}

pub fn product_and(x: f64, y: f64) -> f64 {
    x * y
}

// ---------------------------------------------------------------------------
// tape builders

pub fn lnn_and_node(b: &mut TapeBuilder, beta: NodeId, weights: &[NodeId], x: &[NodeId]) -> NodeId {
    debug_assert_eq!(weights.len(), x.len());
    let total_w = b.sum(weights);
    let wx = b.dot(weights.iter().copied().zip(x.iter().copied()).collect());
    let pre = b.linear(vec![(beta, 1.0), (total_w, -1.0), (wx, 1.0)], 0.0);
    b.relu1(pre)
}

pub fn lnn_or_node(b: &mut TapeBuilder, beta: NodeId, weights: &[NodeId], x: &[NodeId]) -> NodeId {
    let negated: Vec<NodeId> = x.iter().map(|&xi| b.one_minus(xi)).collect();
    let and = lnn_and_node(b, beta, weights, &negated);
    b.one_minus(and)
}

/// `1 − relu1(β − Σ w)` over the weights of the predicates that hold.
pub fn lnn_pred_node(b: &mut TapeBuilder, beta: NodeId, present_weights: &[NodeId]) -> NodeId {
    let mut terms = vec![(beta, 1.0)];
    terms.extend(present_weights.iter().map(|&w| (w, -1.0)));
    let pre = b.linear(terms, 0.0);
    let clamped = b.relu1(pre);
    b.one_minus(clamped)
}

pub fn product_node(b: &mut TapeBuilder, x: &[NodeId]) -> NodeId {
    let mut acc = x[0];
    for &xi in &x[1..] {
        acc = b.mul(acc, xi);
    }
    acc
}

pub fn lukasiewicz_node(b: &mut TapeBuilder, x: &[NodeId]) -> NodeId {
    let pre = b.linear(x.iter().map(|&xi| (xi, 1.0)).collect(), -((x.len() as f64) - 1.0));
    b.relu(pre)
}

// ---------------------------------------------------------------------------
// strategies

/// Free parameters owned by one template node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub strategy: String,
    pub arity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub slots: BTreeMap<String, Vec<ParamId>>,
}

impl ParamBlock {
    fn slot(&self, name: &str) -> Result<&[ParamId], OperatorError> {
        self.slots
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| OperatorError::MissingSlot(self.strategy.clone(), name.to_string()))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.values().flatten().copied()
    }
}

/// Decoded operator values as they appear in rule listings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorExport {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub weights: Vec<f64>,
    pub operand_names: Vec<String>,
}

/// Turns the truth values of a leaf's domain predicates into one value.
pub trait LeafCombiner: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn allocate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        domain_size: usize,
        rng: &mut dyn RngCore,
    ) -> ParamBlock;

    /// Emits the decoded parameters; called once per network.
    fn decode(&self, b: &mut TapeBuilder, block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError>;

    /// Combines base facts; `present` lists the domain indices whose fact
    /// holds (truth 1). All other domain predicates contribute 0.
    fn combine(&self, b: &mut TapeBuilder, decoded: &[NodeId], present: &[usize]) -> NodeId;

    /// `(β, weights)` after decoding.
    fn decoded_values(&self, store: &ParamStore, block: &ParamBlock) -> (Option<f64>, Vec<f64>);
}

/// LNN-pred leaves: `β = relu(β̂)`, `w = relu(ŵ)`.
#[derive(Debug, Clone)]
pub struct LnnPredCombiner {
    pub beta_init: f64,
    /// Initial `ŵ` of every domain predicate. Below `beta_init`, so one
    /// true predicate starts strictly inside the linear piece.
    pub weight_init: f64,
    pub noise: f64,
}

impl Default for LnnPredCombiner {
    fn default() -> Self {
        Self {
            beta_init: 1.0,
            weight_init: 0.75,
            noise: 0.01,
        }
    }
}

impl LeafCombiner for LnnPredCombiner {
    fn name(&self) -> &'static str {
        "lnn-pred"
    }

    fn allocate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        domain_size: usize,
        rng: &mut dyn RngCore,
    ) -> ParamBlock {
        let beta = store.alloc(format!("{prefix}.beta_hat"), self.beta_init);
        let weights = (0..domain_size)
            .map(|i| {
                let jitter = self.noise * (2.0 * rng.random::<f64>() - 1.0);
                store.alloc(format!("{prefix}.w_hat[{i}]"), self.weight_init + jitter)
            })
            .collect();
        ParamBlock {
            strategy: self.name().into(),
            arity: domain_size,
            alpha: None,
            slots: BTreeMap::from([("beta_hat".into(), vec![beta]), ("w_hat".into(), weights)]),
        }
    }

    fn decode(&self, b: &mut TapeBuilder, block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError> {
        let beta_hat = block.slot("beta_hat")?[0];
        let mut out = vec![];
        let p = b.param(beta_hat);
        out.push(b.relu(p));
        for &w in block.slot("w_hat")? {
            let p = b.param(w);
            out.push(b.relu(p));
        }
        Ok(out)
    }

    fn combine(&self, b: &mut TapeBuilder, decoded: &[NodeId], present: &[usize]) -> NodeId {
        let weights: Vec<NodeId> = present.iter().map(|&i| decoded[1 + i]).collect();
        lnn_pred_node(b, decoded[0], &weights)
    }

    fn decoded_values(&self, store: &ParamStore, block: &ParamBlock) -> (Option<f64>, Vec<f64>) {
        let beta = block.slots["beta_hat"][0];
        let weights = block.slots["w_hat"]
            .iter()
            .map(|&w| store.get(w).max(0.0))
            .collect();
        (Some(store.get(beta).max(0.0)), weights)
    }
}

/// Attention leaves: a softmax-weighted average of the domain facts.
#[derive(Debug, Clone)]
pub struct AttentionCombiner {
    pub noise: f64,
}

impl Default for AttentionCombiner {
    fn default() -> Self {
        Self { noise: 0.1 }
    }
}

impl LeafCombiner for AttentionCombiner {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn allocate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        domain_size: usize,
        rng: &mut dyn RngCore,
    ) -> ParamBlock {
        let normal = Normal::new(0.0, self.noise).expect("valid std");
        let logits = (0..domain_size)
            .map(|i| store.alloc(format!("{prefix}.logit[{i}]"), normal.sample(rng)))
            .collect();
        ParamBlock {
            strategy: self.name().into(),
            arity: domain_size,
            alpha: None,
            slots: BTreeMap::from([("logits".into(), logits)]),
        }
    }

    fn decode(&self, b: &mut TapeBuilder, block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError> {
        let logits: Vec<NodeId> = block.slot("logits")?.iter().map(|&p| b.param(p)).collect();
        Ok(b.softmax(&logits))
    }

    fn combine(&self, b: &mut TapeBuilder, decoded: &[NodeId], present: &[usize]) -> NodeId {
        if present.is_empty() {
            return b.constant(0.0);
        }
        b.sum(&present.iter().map(|&i| decoded[i]).collect::<Vec<_>>())
    }

    fn decoded_values(&self, store: &ParamStore, block: &ParamBlock) -> (Option<f64>, Vec<f64>) {
        let logits: Vec<f64> = block.slots["logits"].iter().map(|&p| store.get(p)).collect();
        (None, softmax(&logits))
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// An n-ary conjunction; disjunction follows by De Morgan.
pub trait Connective: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn allocate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        arity: usize,
        alpha: AlphaConfig,
        rng: &mut dyn RngCore,
    ) -> Result<ParamBlock, OperatorError>;

    fn decode(&self, b: &mut TapeBuilder, block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError>;

    fn conjoin(&self, b: &mut TapeBuilder, decoded: &[NodeId], x: &[NodeId]) -> NodeId;

    fn disjoin(&self, b: &mut TapeBuilder, decoded: &[NodeId], x: &[NodeId]) -> NodeId {
        let negated: Vec<NodeId> = x.iter().map(|&xi| b.one_minus(xi)).collect();
        let and = self.conjoin(b, decoded, &negated);
        b.one_minus(and)
    }

    /// Decoded `(β, w)` for constrained operators, `None` when parameter-free.
    fn decoded_params(
        &self,
        store: &ParamStore,
        block: &ParamBlock,
    ) -> Result<Option<OperatorParams>, OperatorError>;
}

/// LNN-∧ with `(β, w)` folded from vertex/ray generators of its
/// constraint polyhedron.
#[derive(Debug, Clone)]
pub struct LnnConnective {
    pub enumerator: Arc<dyn VertexEnumerator>,
    pub init: polytope::InitScheme,
}

impl LnnConnective {
    pub fn new(enumerator: Arc<dyn VertexEnumerator>) -> Self {
        Self {
            enumerator,
            init: polytope::InitScheme::default(),
        }
    }

    fn vrep(&self, block: &ParamBlock) -> Result<Arc<polytope::VRepresentation>, OperatorError> {
        let alpha = block
            .alpha
            .ok_or_else(|| OperatorError::MissingSlot(self.name().into(), "alpha".into()))?;
        Ok(polytope::cached_vrep(block.arity, AlphaConfig::new(alpha)?, self.enumerator.as_ref())?)
    }
}

impl Connective for LnnConnective {
    fn name(&self) -> &'static str {
        "lnn"
    }

    fn allocate(
        &self,
        store: &mut ParamStore,
        prefix: &str,
        arity: usize,
        alpha: AlphaConfig,
        rng: &mut dyn RngCore,
    ) -> Result<ParamBlock, OperatorError> {
        let vrep = polytope::cached_vrep(arity, alpha, self.enumerator.as_ref())?;
        let folded = polytope::init_folded_with(&vrep, &self.init, rng);
        let mu = folded
            .mu_hat
            .iter()
            .enumerate()
            .map(|(i, &v)| store.alloc(format!("{prefix}.mu_hat[{i}]"), v))
            .collect();
        let lambda = folded
            .lambda_hat
            .iter()
            .enumerate()
            .map(|(i, &v)| store.alloc(format!("{prefix}.lambda_hat[{i}]"), v))
            .collect();
        Ok(ParamBlock {
            strategy: self.name().into(),
            arity,
            alpha: Some(alpha.value()),
            slots: BTreeMap::from([("mu_hat".into(), mu), ("lambda_hat".into(), lambda)]),
        })
    }

    fn decode(&self, b: &mut TapeBuilder, block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError> {
        let vrep = self.vrep(block)?;
        let mu: Vec<NodeId> = block.slot("mu_hat")?.iter().map(|&p| b.param(p)).collect();
        let lambda: Vec<NodeId> = block.slot("lambda_hat")?.iter().map(|&p| b.param(p)).collect();
        Ok(polytope::fold_node(b, &vrep, &mu, &lambda)?)
    }

    fn conjoin(&self, b: &mut TapeBuilder, decoded: &[NodeId], x: &[NodeId]) -> NodeId {
        lnn_and_node(b, decoded[0], &decoded[1..], x)
    }

    fn decoded_params(
        &self,
        store: &ParamStore,
        block: &ParamBlock,
    ) -> Result<Option<OperatorParams>, OperatorError> {
        let vrep = self.vrep(block)?;
        let folded = FoldedParams {
            mu_hat: block.slot("mu_hat")?.iter().map(|&p| store.get(p)).collect(),
            lambda_hat: block.slot("lambda_hat")?.iter().map(|&p| store.get(p)).collect(),
        };
        Ok(Some(polytope::fold(&folded, &vrep)?))
    }
}

/// Product t-norm `Π xᵢ`.
#[derive(Debug, Clone, Default)]
pub struct ProductConnective;

/// Łukasiewicz t-norm `max(0, Σ xᵢ − (n − 1))`.
#[derive(Debug, Clone, Default)]
pub struct LukasiewiczConnective;

macro_rules! parameter_free_connective {
    ($ty:ty, $name:literal, $build:path) => {
        impl Connective for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn allocate(
                &self,
                _store: &mut ParamStore,
                _prefix: &str,
                arity: usize,
                _alpha: AlphaConfig,
                _rng: &mut dyn RngCore,
            ) -> Result<ParamBlock, OperatorError> {
                Ok(ParamBlock {
                    strategy: self.name().into(),
                    arity,
                    alpha: None,
                    slots: BTreeMap::new(),
                })
            }

            fn decode(&self, _b: &mut TapeBuilder, _block: &ParamBlock) -> Result<Vec<NodeId>, OperatorError> {
                Ok(Vec::new())
            }

            fn conjoin(&self, b: &mut TapeBuilder, _decoded: &[NodeId], x: &[NodeId]) -> NodeId {
                $build(b, x)
            }

            fn decoded_params(
                &self,
                _store: &ParamStore,
                _block: &ParamBlock,
            ) -> Result<Option<OperatorParams>, OperatorError> {
                Ok(None)
            }
        }
    };
}

parameter_free_connective!(ProductConnective, "product", product_node);
parameter_free_connective!(LukasiewiczConnective, "lukasiewicz", lukasiewicz_node);
