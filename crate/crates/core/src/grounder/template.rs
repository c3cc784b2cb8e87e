use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::kb::{KnowledgeBase, PredId};
use super::GroundError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeOp {
    And,
    Or,
    Not,
}

/// On-disk template syntax: a JSON tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub name: String,
    pub vars: Vec<String>,
    #[serde(default)]
    pub op: Option<NodeOp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TemplateSpec>,
    /// Explicit constants per variable for the universe of a `not` node.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub universe: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conditions: Vec<serde_json::Value>,
}

impl TemplateSpec {
    pub fn leaf(name: &str, vars: &[&str], domain: &[&str]) -> Self {
        Self {
            name: name.into(),
            vars: vars.iter().map(|v| v.to_string()).collect(),
            op: None,
            domain: domain.iter().map(|v| v.to_string()).collect(),
            children: vec![],
            universe: BTreeMap::new(),
            conditions: vec![],
        }
    }

    pub fn internal(name: &str, vars: &[&str], op: NodeOp, children: Vec<TemplateSpec>) -> Self {
        Self {
            name: name.into(),
            vars: vars.iter().map(|v| v.to_string()).collect(),
            op: Some(op),
            domain: vec![],
            children,
            universe: BTreeMap::new(),
            conditions: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf { domain: Vec<String> },
    And,
    Or,
    Not,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateNode {
    pub name: String,
    pub vars: Vec<String>,
    pub kind: NodeKind,
    pub children: Vec<usize>,
    pub universe: BTreeMap<String, Vec<String>>,
}

/// A validated template. Nodes are stored children-first, root last.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    nodes: Vec<TemplateNode>,
    spec: TemplateSpec,
}

impl Template {
    pub fn from_spec(spec: TemplateSpec) -> Result<Self, GroundError> {
        let mut nodes = Vec::new();
        let mut names = HashSet::new();
        flatten(&spec, &mut nodes, &mut names)?;
        Ok(Self { nodes, spec })
    }

    pub fn from_json(text: &str) -> Result<Self, GroundError> {
        let spec: TemplateSpec =
            serde_json::from_str(text).map_err(|e| GroundError::Template(format!("invalid template JSON: {e}")))?;
        Self::from_spec(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GroundError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GroundError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn spec(&self) -> &TemplateSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[TemplateNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &TemplateNode {
        &self.nodes[i]
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Resolves every leaf domain against `kb`, checking arities.
    pub fn resolve_domains(&self, kb: &KnowledgeBase) -> Result<Vec<Vec<PredId>>, GroundError> {
        self.nodes
            .iter()
            .map(|node| match &node.kind {
                NodeKind::Leaf { domain } => domain
                    .iter()
                    .map(|p| match kb.predicate_id(p) {
                        Some(pid) if kb.predicate(pid).arity != node.vars.len() => Err(GroundError::ArityMismatch {
                            predicate: p.clone(),
                            expected: node.vars.len(),
                            got: kb.predicate(pid).arity,
                        }),
                        Some(pid) => Ok(pid),
                        None => Err(GroundError::MissingPredicate {
                            node: node.name.clone(),
                            predicate: p.clone(),
                        }),
                    })
                    .collect(),
                _ => Ok(vec![]),
            })
            .collect()
    }
}

fn same_var_set(a: &[String], b: &[String]) -> bool {
    a.len() == b.len() && a.iter().all(|v| b.contains(v))
}

fn flatten(spec: &TemplateSpec, out: &mut Vec<TemplateNode>, names: &mut HashSet<String>) -> Result<usize, GroundError> {
    let err = |msg: String| GroundError::Template(format!("node '{}': {msg}", spec.name));
    if !names.insert(spec.name.clone()) {
        return Err(GroundError::Unsupported(format!(
            "node name '{}' appears twice; shared (DAG) template nodes are not supported",
            spec.name
        )));
    }
    if !spec.conditions.is_empty() {
        return Err(GroundError::Unsupported(format!(
            "node '{}': inequality conditions are not supported",
            spec.name
        )));
    }
    if spec.vars.is_empty() {
        return Err(err("needs at least one variable".into()));
    }
    let distinct: HashSet<&String> = spec.vars.iter().collect();
    if distinct.len() != spec.vars.len() {
        return Err(err("repeated variable in signature".into()));
    }
    if !spec.universe.is_empty() && spec.op != Some(NodeOp::Not) {
        return Err(err("only 'not' nodes take a universe".into()));
    }
    let children = spec
        .children
        .iter()
        .map(|c| flatten(c, out, names))
        .collect::<Result<Vec<_>, _>>()?;
    let child_vars = |i: usize| &out[children[i]].vars;
    let kind = match spec.op {
        None => {
            if !children.is_empty() {
                return Err(err("a leaf cannot have children".into()));
            }
            if spec.domain.is_empty() {
                return Err(err("a leaf needs a nonempty domain".into()));
            }
            NodeKind::Leaf {
                domain: spec.domain.clone(),
            }
        }
        Some(op) => {
            if !spec.domain.is_empty() {
                return Err(err("only leaves take a domain".into()));
            }
            if children.is_empty() {
                return Err(err("an operator node needs children".into()));
            }
            match op {
                NodeOp::And => {
                    let body: HashSet<&String> = (0..children.len()).flat_map(child_vars).collect();
                    if let Some(v) = spec.vars.iter().find(|v| !body.contains(v)) {
                        return Err(err(format!("head variable {v} does not occur in the body")));
                    }
                    NodeKind::And
                }
                NodeOp::Or => {
                    if let Some(i) = (0..children.len()).find(|&i| !same_var_set(child_vars(i), &spec.vars)) {
                        return Err(err(format!(
                            "disjunct '{}' must range over the same variables",
                            out[children[i]].name
                        )));
                    }
                    NodeKind::Or
                }
                NodeOp::Not => {
                    if children.len() != 1 {
                        return Err(err("a negation has exactly one child".into()));
                    }
                    if !same_var_set(child_vars(0), &spec.vars) {
                        return Err(err("a negation keeps its child's variables".into()));
                    }
                    if let Some(v) = spec.universe.keys().find(|v| !spec.vars.contains(v)) {
                        return Err(err(format!("universe given for unknown variable {v}")));
                    }
                    NodeKind::Not
                }
            }
        }
    };
    out.push(TemplateNode {
        name: spec.name.clone(),
        vars: spec.vars.clone(),
        kind,
        children,
        universe: spec.universe.clone(),
    });
    Ok(out.len() - 1)
}
