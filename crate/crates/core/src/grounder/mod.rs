//! Grounds a program template against a knowledge base: generates facts
//! bottom-up with lineage, then compiles one differentiable network whose
//! outputs are the root facts' truth values.

mod facts;
mod kb;
mod network;
mod template;

use thiserror::Error;

pub use facts::{generate_facts, Binding, FactTable, Intermediates, Lineage, NodeFacts};
pub use kb::{ConstId, KnowledgeBase, PredId, Predicate};
pub use network::{compile_network, GroundNetwork, NodeRule, TemplateCheckpoint, TemplateModel};
pub use template::{NodeKind, NodeOp, Template, TemplateNode, TemplateSpec};

use crate::operators::OperatorError;
use crate::registry::UnknownStrategy;
use crate::tape::TapeError;

#[derive(Debug, Error)]
pub enum GroundError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{origin}:{line}: {message}")]
    Parse { origin: String, line: usize, message: String },
    #[error("predicate {predicate} has arity {expected}, used with {got}")]
    ArityMismatch { predicate: String, expected: usize, got: usize },
    #[error("template node '{node}' references unknown predicate '{predicate}'")]
    MissingPredicate { node: String, predicate: String },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("unsupported template feature: {0}")]
    Unsupported(String),
    #[error("no root fact ({0})")]
    UnknownFact(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Strategy(#[from] UnknownStrategy),
}
