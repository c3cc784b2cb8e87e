//! Adagrad optimization of tape parameters under margin-ranking or
//! pointwise squared-error objectives.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounder::GroundError;
use crate::params::ParamStore;
use crate::tape::{Gradient, NodeId, Tape, TapeError};

/// Slack allowed on connective constraints after an epoch.
pub const CONSTRAINT_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("empty mini-batch")]
    EmptyBatch,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("constraint violated by {violation:e} after epoch {epoch}")]
    ConstraintViolation { epoch: usize, violation: f64 },
    #[error("gave up drawing negatives for relation {relation} after {tries} tries")]
    NegativesExhausted { relation: String, tries: usize },
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Ground(#[from] GroundError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            margin: 0.5,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            alpha: 0.95,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("margin must be nonnegative, got {}", self.margin)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        crate::operators::AlphaConfig::new(self.alpha)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Per-parameter Adagrad; accumulators grow on demand as parameters are
/// allocated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Adagrad {
    acc: Vec<f64>,
    pub eps: f64,
}

impl Adagrad {
    pub fn new() -> Self {
        Self { acc: Vec::new(), eps: 1e-8 }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.acc
    }

    pub fn update(&mut self, params: &mut [f64], index: usize, g: f64, step_size: f64) {
        if index >= self.acc.len() {
            self.acc.resize(index + 1, 0.0);
        }
        adagrad_update(&mut params[index], &mut self.acc[index], g, step_size, self.eps);
    }

    pub fn step(&mut self, params: &mut [f64], grad: &Gradient, step_size: f64) {
        for (pid, g) in grad.iter() {
            self.update(params, pid.0, g, step_size);
        }
    }

    pub fn step_dense(&mut self, params: &mut [f64], grad: &[f64], step_size: f64) {
        for (i, &g) in grad.iter().enumerate() {
            self.update(params, i, g, step_size);
        }
    }
}

/// `acc += g²; value −= step_size·g/(√acc + eps)`.
pub fn adagrad_update(value: &mut f64, acc: &mut f64, g: f64, step_size: f64, eps: f64) {
    *acc += g * g;
    *value -= step_size * g / (acc.sqrt() + eps);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch<T> {
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
}

/// `Σ_{p, n} max(0, s_n − s_p + γ)` over all positive/negative pairs.
pub fn margin_loss(pos: &[f64], neg: &[f64], margin: f64) -> Result<f64, TrainError> {
    Ok(margin_loss_grad(pos, neg, margin)?.0)
}

/// Loss with its gradient with respect to each score.
pub fn margin_loss_grad(pos: &[f64], neg: &[f64], margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut loss = 0.0;
    let mut dpos = vec![0.0; pos.len()];
    let mut dneg = vec![0.0; neg.len()];
    for (i, p) in pos.iter().enumerate() {
        for (j, n) in neg.iter().enumerate() {
            let h = n - p + margin;
            if h > 0.0 {
                loss += h;
                dpos[i] -= 1.0;
                dneg[j] += 1.0;
            }
        }
    }
    Ok((loss, dpos, dneg))
}

/// Mean squared error with its gradient.
pub fn squared_loss_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len().max(1) as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    (loss, grad)
}

// ---------------------------------------------------------------------------
// fit loop

/// A trainable problem.
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn steps_per_epoch(&self) -> usize;
    /// Loss and gradient of one mini-batch. May allocate new parameters.
    fn loss_and_grad(&mut self, rng: &mut dyn RngCore) -> Result<(f64, Gradient), TrainError>;
    /// Higher is better.
    fn validation_metric(&mut self) -> Result<Option<f64>, TrainError> {
        Ok(None)
    }
    /// Largest connective constraint violation; nonpositive when feasible.
    fn constraint_violation(&self) -> Result<f64, TrainError> {
        Ok(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub trace: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

impl FitReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,loss,val_metric,seconds")?;
        for r in &self.trace {
            let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{:.3}", r.epoch, r.loss, val, r.seconds)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io = |e: std::io::Error| TrainError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let f = std::fs::File::create(path).map_err(io)?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(io)
    }
}

/// Runs `epochs × steps_per_epoch` Adagrad steps. When the objective reports
/// a validation metric, the best-scoring parameters are restored at the end;
/// ties go to the later epoch.
pub fn fit(obj: &mut dyn Objective, cfg: &TrainConfig) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adagrad::new();
    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let steps = obj.steps_per_epoch().max(1);
        let mut total = 0.0;
        for step in 0..steps {
            let (loss, grad) = obj.loss_and_grad(&mut rng)?;
            if !loss.is_finite() || grad.iter().any(|(_, g)| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, step });
            }
            total += loss;
            opt.step(obj.params_mut().values_mut(), &grad, cfg.step_size);
        }
        let violation = obj.constraint_violation()?;
        if violation > CONSTRAINT_TOL {
            return Err(TrainError::ConstraintViolation { epoch, violation });
        }
        let val = obj.validation_metric()?;
        let record = EpochRecord {
            epoch,
            loss: total / steps as f64,
            val_metric: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val {:?} ({:.1}s)",
            record.loss,
            record.val_metric,
            record.seconds
        );
        report.trace.push(record);
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(b, _)| v >= *b) {
                best = Some((v, obj.params().values().to_vec()));
                report.best_epoch = Some(epoch);
                report.best_metric = Some(v);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, snapshot)) = best {
        let values = obj.params_mut().values_mut();
        values[..snapshot.len()].copy_from_slice(&snapshot);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// tape-backed objective

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Pairwise hinge between examples with target 1 and target 0.
    Margin(f64),
    Squared,
}

/// One supervised output node of one tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub tape: usize,
    pub node: NodeId,
    pub target: f64,
}

type Validator<'a> = Box<dyn FnMut(&ParamStore) -> Result<f64, TrainError> + 'a>;
type ConstraintCheck<'a> = Box<dyn Fn(&ParamStore) -> Result<f64, TrainError> + 'a>;

/// Supervised training of output nodes on a set of tapes sharing one
/// parameter store.
pub struct TapeObjective<'a> {
    store: &'a mut ParamStore,
    tapes: Vec<Tape>,
    positives: Vec<Example>,
    negatives: Vec<Example>,
    all: Vec<Example>,
    loss: Loss,
    batch_size: usize,
    steps: usize,
    validator: Option<Validator<'a>>,
    constraints: Option<ConstraintCheck<'a>>,
}

impl<'a> TapeObjective<'a> {
    pub fn new(store: &'a mut ParamStore, tapes: Vec<Tape>, examples: Vec<Example>, loss: Loss, batch_size: usize) -> Self {
        let (positives, negatives) = examples.iter().partition(|e| e.target > 0.5);
        let n = examples.len();
        let steps = n.div_ceil(batch_size.max(1)).max(1);
        Self {
            store,
            tapes,
            positives,
            negatives,
            all: examples,
            loss,
            batch_size: batch_size.max(1),
            steps,
            validator: None,
            constraints: None,
        }
    }

    pub fn with_steps_per_epoch(mut self, steps: usize) -> Self {
        self.steps = steps.max(1);
        self
    }

    pub fn with_validator(mut self, f: impl FnMut(&ParamStore) -> Result<f64, TrainError> + 'a) -> Self {
        self.validator = Some(Box::new(f));
        self
    }

    pub fn with_constraints(mut self, f: impl Fn(&ParamStore) -> Result<f64, TrainError> + 'a) -> Self {
        self.constraints = Some(Box::new(f));
        self
    }

    fn draw(pool: &[Example], k: usize, rng: &mut dyn RngCore) -> Vec<Example> {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }

    /// Loss and gradient over an explicit set of examples and per-example
    /// output gradients.
    fn backprop(&self, batch: &[Example], dscore: &[f64]) -> Result<Gradient, TrainError> {
        let mut grad = Gradient::default();
        for t in 0..self.tapes.len() {
            let seeds: Vec<(NodeId, f64)> = batch
                .iter()
                .zip(dscore)
                .filter(|(e, d)| e.tape == t && **d != 0.0)
                .map(|(e, &d)| (e.node, d))
                .collect();
            if seeds.is_empty() {
                continue;
            }
            let eval = self.tapes[t].forward(self.store.values(), &[])?;
            grad.accumulate(&self.tapes[t].backward_seeded(&eval, &seeds)?);
        }
        Ok(grad)
    }

    fn scores(&self, batch: &[Example]) -> Result<Vec<f64>, TrainError> {
        let mut evals = vec![None; self.tapes.len()];
        batch
            .iter()
            .map(|e| {
                if evals[e.tape].is_none() {
                    evals[e.tape] = Some(self.tapes[e.tape].forward(self.store.values(), &[])?);
                }
                Ok(evals[e.tape].as_ref().expect("evaluated").value(e.node))
            })
            .collect()
    }
}

impl Objective for TapeObjective<'_> {
    fn params(&self) -> &ParamStore {
        self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    fn steps_per_epoch(&self) -> usize {
        self.steps
    }

    fn loss_and_grad(&mut self, rng: &mut dyn RngCore) -> Result<(f64, Gradient), TrainError> {
        match self.loss {
            Loss::Margin(gamma) => {
                if self.positives.is_empty() || self.negatives.is_empty() {
                    return Err(TrainError::EmptyBatch);
                }
                let pos = Self::draw(&self.positives, self.batch_size, rng);
                let neg = Self::draw(&self.negatives, self.batch_size, rng);
                let sp = self.scores(&pos)?;
                let sn = self.scores(&neg)?;
                let (loss, dp, dn) = margin_loss_grad(&sp, &sn, gamma)?;
                let batch: Vec<Example> = pos.into_iter().chain(neg).collect();
                let d: Vec<f64> = dp.into_iter().chain(dn).collect();
                Ok((loss, self.backprop(&batch, &d)?))
            }
            Loss::Squared => {
                if self.all.is_empty() {
                    return Err(TrainError::EmptyBatch);
                }
                let batch = if self.batch_size >= self.all.len() {
                    self.all.clone()
                } else {
                    Self::draw(&self.all, self.batch_size, rng)
                };
                let pred = self.scores(&batch)?;
                let target: Vec<f64> = batch.iter().map(|e| e.target).collect();
                let (loss, d) = squared_loss_grad(&pred, &target);
                Ok((loss, self.backprop(&batch, &d)?))
            }
        }
    }

    fn validation_metric(&mut self) -> Result<Option<f64>, TrainError> {
        match self.validator.as_mut() {
            Some(f) => f(self.store).map(Some),
            None => Ok(None),
        }
    }

    fn constraint_violation(&self) -> Result<f64, TrainError> {
        match &self.constraints {
            Some(f) => f(self.store),
            None => Ok(f64::NEG_INFINITY),
        }
    }
}

// ---------------------------------------------------------------------------
// JSON files

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io = |m: String| TrainError::Io {
        path: path.display().to_string(),
        message: m,
    };
    let text = serde_json::to_string_pretty(value).map_err(|e| io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| io(e.to_string()))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, TrainError> {
    let path = path.as_ref();
    let io = |m: String| TrainError::Io {
        path: path.display().to_string(),
        message: m,
    };
    let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io(e.to_string()))
}
