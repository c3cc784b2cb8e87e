//! Differentiable logical neural networks for inductive logic programming.
//!
//! Rules are learned by grounding a template against a knowledge base into a
//! computation tape, then fitting operator parameters with gradient descent.
//! Connective parameters are kept inside their constraint polyhedra by
//! construction (see [`polytope`]).

pub mod countries;
pub mod gridworld;
pub mod grounder;
pub mod kbc;
pub mod operators;
pub mod params;
pub mod polytope;
pub mod registry;
pub mod tape;
pub mod train;

pub use operators::{AlphaConfig, Connective, LeafCombiner, OperatorParams};
pub use params::{ParamId, ParamStore};
pub use registry::Registry;
pub use tape::{NodeId, Tape, TapeBuilder};
