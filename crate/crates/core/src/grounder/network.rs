use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::facts::{FactTable, Lineage};
use super::kb::KnowledgeBase;
use super::template::{NodeKind, Template, TemplateSpec};
use super::GroundError;
use crate::operators::{AlphaConfig, Connective, LeafCombiner, OperatorExport, ParamBlock};
use crate::params::{ParamId, ParamStore};
use crate::registry::Registry;
use crate::tape::{NodeId, Tape, TapeBuilder};

/// Trainable parameters for one template, shared by every network grounded
/// from it.
#[derive(Debug, Clone)]
pub struct TemplateModel {
    template: Template,
    combiner: Arc<dyn LeafCombiner>,
    connective: Arc<dyn Connective>,
    alpha: AlphaConfig,
    store: ParamStore,
    blocks: Vec<Option<ParamBlock>>,
}

/// Serialized form of a [`TemplateModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateCheckpoint {
    pub template: TemplateSpec,
    pub combiner: String,
    pub connective: String,
    pub alpha: f64,
    pub store: ParamStore,
    pub blocks: Vec<Option<ParamBlock>>,
}

/// Decoded parameters of one template node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRule {
    pub node: String,
    pub vars: Vec<String>,
    #[serde(flatten)]
    pub op: OperatorExport,
}

impl TemplateModel {
    pub fn new(
        template: Template,
        combiner: Arc<dyn LeafCombiner>,
        connective: Arc<dyn Connective>,
        alpha: AlphaConfig,
        seed: u64,
    ) -> Result<Self, GroundError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(template.nodes().len());
        for node in template.nodes() {
            let block = match &node.kind {
                NodeKind::Leaf { domain } => Some(combiner.allocate(&mut store, &node.name, domain.len(), &mut rng)),
                NodeKind::And | NodeKind::Or => Some(connective.allocate(
                    &mut store,
                    &node.name,
                    node.children.len(),
                    alpha,
                    &mut rng,
                )?),
                NodeKind::Not => None,
            };
            blocks.push(block);
        }
        Ok(Self {
            template,
            combiner,
            connective,
            alpha,
            store,
            blocks,
        })
    }

    pub fn from_registry(
        template: Template,
        registry: &Registry,
        combiner: &str,
        connective: &str,
        alpha: AlphaConfig,
        seed: u64,
    ) -> Result<Self, GroundError> {
        Self::new(
            template,
            registry.combiner(combiner)?,
            registry.connective(connective)?,
            alpha,
            seed,
        )
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn alpha(&self) -> AlphaConfig {
        self.alpha
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn combiner(&self) -> &dyn LeafCombiner {
        self.combiner.as_ref()
    }

    pub fn connective(&self) -> &dyn Connective {
        self.connective.as_ref()
    }

    pub fn block(&self, node: usize) -> Option<&ParamBlock> {
        self.blocks[node].as_ref()
    }

    /// Parameter ids per template node that carries an operator.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        self.template
            .nodes()
            .iter()
            .zip(&self.blocks)
            .filter_map(|(n, b)| b.as_ref().map(|b| (n.name.clone(), b.param_ids().collect())))
            .collect()
    }

    pub fn checkpoint(&self) -> TemplateCheckpoint {
        TemplateCheckpoint {
            template: self.template.spec().clone(),
            combiner: self.combiner.name().into(),
            connective: self.connective.name().into(),
            alpha: self.alpha.value(),
            store: self.store.clone(),
            blocks: self.blocks.clone(),
        }
    }

    pub fn restore(ckpt: TemplateCheckpoint, registry: &Registry) -> Result<Self, GroundError> {
        let template = Template::from_spec(ckpt.template)?;
        if ckpt.blocks.len() != template.nodes().len() {
            return Err(GroundError::Template("checkpoint does not match its template".into()));
        }
        Ok(Self {
            template,
            combiner: registry.combiner(&ckpt.combiner)?,
            connective: registry.connective(&ckpt.connective)?,
            alpha: AlphaConfig::new(ckpt.alpha)?,
            store: ckpt.store,
            blocks: ckpt.blocks,
        })
    }

    /// Decoded operator values for every parameterized node, root last.
    pub fn rules(&self) -> Result<Vec<NodeRule>, GroundError> {
        let mut out = Vec::new();
        for (node, block) in self.template.nodes().iter().zip(&self.blocks) {
            let Some(block) = block else { continue };
            let op = match &node.kind {
                NodeKind::Leaf { domain } => {
                    let (beta, weights) = self.combiner.decoded_values(&self.store, block);
                    OperatorExport {
                        kind: self.combiner.name().into(),
                        alpha: None,
                        beta,
                        weights,
                        operand_names: domain.clone(),
                    }
                }
                kind => {
                    let params = self.connective.decoded_params(&self.store, block)?;
                    let label = if *kind == NodeKind::And { "and" } else { "or" };
                    OperatorExport {
                        kind: format!("{}-{label}", self.connective.name()),
                        alpha: block.alpha,
                        beta: params.as_ref().map(|p| p.beta),
                        weights: params.map(|p| p.weights).unwrap_or_default(),
                        operand_names: node
                            .children
                            .iter()
                            .map(|&c| self.template.node(c).name.clone())
                            .collect(),
                    }
                }
            };
            out.push(NodeRule {
                node: node.name.clone(),
                vars: node.vars.clone(),
                op,
            });
        }
        Ok(out)
    }

    /// Worst constraint violation over all constrained connectives.
    pub fn max_constraint_violation(&self) -> Result<f64, GroundError> {
        let mut worst = f64::NEG_INFINITY;
        for block in self.blocks.iter().flatten() {
            let Some(alpha) = block.alpha else { continue };
            if let Some(p) = self.connective.decoded_params(&self.store, block)? {
                worst = worst.max(p.lnn_violation(alpha));
            }
        }
        Ok(worst)
    }

    pub fn compile(&self, kb: &KnowledgeBase, facts: &FactTable) -> Result<GroundNetwork, GroundError> {
        compile_network(self, kb, facts)
    }

    /// Grounds `kb` and compiles the resulting network in one step.
    pub fn ground(&self, kb: &KnowledgeBase) -> Result<GroundNetwork, GroundError> {
        let facts = super::generate_facts(kb, &self.template)?;
        compile_network(self, kb, &facts)
    }
}

/// One tape computing every root fact of a template against one KB.
#[derive(Debug, Clone)]
pub struct GroundNetwork {
    tape: Tape,
    outputs: Vec<NodeId>,
    root_facts: Vec<Vec<String>>,
    index: HashMap<Vec<String>, usize>,
    zero: NodeId,
}

impl GroundNetwork {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn root_facts(&self) -> &[Vec<String>] {
        &self.root_facts
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Output node of `fact`, or a constant-0 node when the template cannot
    /// derive it.
    pub fn node_or_zero(&self, fact: &[&str]) -> NodeId {
        self.fact_index(fact).map_or(self.zero, |i| self.outputs[i])
    }

    pub fn fact_index(&self, fact: &[&str]) -> Option<usize> {
        let key: Vec<String> = fact.iter().map(|s| s.to_string()).collect();
        self.index.get(&key).copied()
    }

    pub fn evaluate_all(&self, store: &ParamStore) -> Result<Vec<f64>, GroundError> {
        let eval = self.tape.forward(store.values(), &[])?;
        Ok(self.outputs.iter().map(|&o| eval.value(o)).collect())
    }

    pub fn evaluate(&self, store: &ParamStore, fact: &[&str]) -> Result<f64, GroundError> {
        let i = self
            .fact_index(fact)
            .ok_or_else(|| GroundError::UnknownFact(fact.join(",")))?;
        let eval = self.tape.forward(store.values(), &[])?;
        Ok(eval.value(self.outputs[i]))
    }
}

struct Compiler<'a> {
    model: &'a TemplateModel,
    facts: &'a FactTable,
    b: TapeBuilder,
    decoded: Vec<Vec<NodeId>>,
    memo: Vec<Vec<Option<NodeId>>>,
    zero: NodeId,
}

impl Compiler<'_> {
    fn fact(&mut self, node: usize, i: usize) -> NodeId {
        if let Some(id) = self.memo[node][i] {
            return id;
        }
        let tnode = self.model.template.node(node);
        let id = match &self.facts.node(node).lineage[i] {
            Lineage::Leaf { present } => self.model.combiner.combine(&mut self.b, &self.decoded[node], present),
            Lineage::And { intermediates } => {
                let inter = self.facts.node(node).intermediates.as_ref().expect("conjunction intermediates");
                let mut group = Vec::with_capacity(intermediates.len());
                for &k in intermediates {
                    let parts = inter.parts[k].clone();
                    let xs: Vec<NodeId> = tnode
                        .children
                        .iter()
                        .zip(parts)
                        .map(|(&c, fi)| self.fact(c, fi))
                        .collect();
                    group.push(self.model.connective.conjoin(&mut self.b, &self.decoded[node], &xs));
                }
                self.b.max(group)
            }
            Lineage::Or { children } => {
                let children = children.clone();
                let xs: Vec<NodeId> = tnode
                    .children
                    .iter()
                    .zip(children)
                    .map(|(&c, fi)| fi.map_or(self.zero, |fi| self.fact(c, fi)))
                    .collect();
                self.model.connective.disjoin(&mut self.b, &self.decoded[node], &xs)
            }
            Lineage::Not { child } => {
                let x = child.map_or(self.zero, |fi| self.fact(tnode.children[0], fi));
                self.b.one_minus(x)
            }
        };
        self.memo[node][i] = Some(id);
        id
    }
}

/// Wires combiners, connectives, maxout and negation for every root fact.
/// Parameter nodes are emitted once and shared by all facts of a node.
pub fn compile_network(
    model: &TemplateModel,
    kb: &KnowledgeBase,
    facts: &FactTable,
) -> Result<GroundNetwork, GroundError> {
    if facts.nodes.len() != model.template.nodes().len() {
        return Err(GroundError::Template("fact table was generated from another template".into()));
    }
    let mut b = TapeBuilder::new();
    let zero = b.constant(0.0);
    let mut decoded = Vec::with_capacity(model.blocks.len());
    for (node, block) in model.template.nodes().iter().zip(&model.blocks) {
        decoded.push(match (block, &node.kind) {
            (None, _) => vec![],
            (Some(block), NodeKind::Leaf { .. }) => model.combiner.decode(&mut b, block)?,
            (Some(block), _) => model.connective.decode(&mut b, block)?,
        });
    }
    let memo = facts.nodes.iter().map(|n| vec![None; n.len()]).collect();
    let mut c = Compiler {
        model,
        facts,
        b,
        decoded,
        memo,
        zero,
    };
    let root = facts.root_index();
    let n_root = facts.root().len();
    let outputs: Vec<NodeId> = (0..n_root).map(|i| c.fact(root, i)).collect();
    let tape = c.b.finish()?;
    let root_facts: Vec<Vec<String>> = facts.root().facts.iter().map(|b| kb.names(b)).collect();
    let index = root_facts.iter().cloned().enumerate().map(|(i, f)| (f, i)).collect();
    Ok(GroundNetwork {
        tape,
        outputs,
        root_facts,
        index,
        zero,
    })
}
