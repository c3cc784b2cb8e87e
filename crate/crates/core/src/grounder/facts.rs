use std::collections::{BTreeSet, HashMap};

use super::kb::{ConstId, KnowledgeBase, PredId};
use super::template::{NodeKind, Template, TemplateNode};
use super::GroundError;

pub type Binding = Vec<ConstId>;

/// How a generated fact was derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lineage {
    /// Indices into the leaf's domain whose base fact holds.
    Leaf { present: Vec<usize> },
    /// Intermediate body facts projecting onto this head fact (maxout group).
    And { intermediates: Vec<usize> },
    /// Matching fact per disjunct, if any.
    Or { children: Vec<Option<usize>> },
    Not { child: Option<usize> },
}

/// Joined body facts of a conjunction node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Intermediates {
    pub vars: Vec<String>,
    pub facts: Vec<Binding>,
    /// Child fact index per child, aligned with `facts`.
    pub parts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct NodeFacts {
    pub vars: Vec<String>,
    pub facts: Vec<Binding>,
    pub lineage: Vec<Lineage>,
    pub intermediates: Option<Intermediates>,
    index: HashMap<Binding, usize>,
}

impl NodeFacts {
    fn new(vars: Vec<String>) -> Self {
        Self {
            vars,
            ..Self::default()
        }
    }

    fn push(&mut self, binding: Binding, lineage: Lineage) -> usize {
        let i = self.facts.len();
        self.index.insert(binding.clone(), i);
        self.facts.push(binding);
        self.lineage.push(lineage);
        i
    }

    pub fn find(&self, binding: &[ConstId]) -> Option<usize> {
        self.index.get(binding).copied()
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// Generated facts for every template node, aligned with `Template::nodes`.
#[derive(Debug, Clone)]
pub struct FactTable {
    pub nodes: Vec<NodeFacts>,
    root: usize,
}

impl FactTable {
    pub fn node(&self, i: usize) -> &NodeFacts {
        &self.nodes[i]
    }

    pub fn root(&self) -> &NodeFacts {
        &self.nodes[self.root]
    }

    pub fn root_index(&self) -> usize {
        self.root
    }
}

/// Position of each variable of `to` inside `from`.
fn permutation(from: &[String], to: &[String]) -> Vec<usize> {
    to.iter()
        .map(|v| from.iter().position(|u| u == v).expect("validated variable sets"))
        .collect()
}

fn project(binding: &[ConstId], perm: &[usize]) -> Binding {
    perm.iter().map(|&i| binding[i]).collect()
}

pub fn generate_facts(kb: &KnowledgeBase, template: &Template) -> Result<FactTable, GroundError> {
    let domains = template.resolve_domains(kb)?;
    let mut nodes: Vec<NodeFacts> = Vec::with_capacity(template.nodes().len());
    for (i, node) in template.nodes().iter().enumerate() {
        let facts = match &node.kind {
            NodeKind::Leaf { .. } => leaf_facts(kb, node, &domains[i]),
            NodeKind::And => and_facts(node, &nodes),
            NodeKind::Or => or_facts(node, &nodes),
            NodeKind::Not => not_facts(kb, template, i, &nodes, &domains)?,
        };
        nodes.push(facts);
    }
    Ok(FactTable {
        nodes,
        root: template.root(),
    })
}

fn leaf_facts(kb: &KnowledgeBase, node: &TemplateNode, domain: &[PredId]) -> NodeFacts {
    let mut present: std::collections::BTreeMap<Binding, Vec<usize>> = Default::default();
    for (d, pid) in domain.iter().enumerate() {
        for tuple in kb.facts(*pid) {
            present.entry(tuple.clone()).or_default().push(d);
        }
    }
    let mut out = NodeFacts::new(node.vars.clone());
    for (binding, present) in present {
        out.push(binding, Lineage::Leaf { present });
    }
    out
}

fn and_facts(node: &TemplateNode, nodes: &[NodeFacts]) -> NodeFacts {
    let first = &nodes[node.children[0]];
    let mut vars = first.vars.clone();
    let mut rows: Vec<(Binding, Vec<usize>)> = first
        .facts
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), vec![i]))
        .collect();
    for &c in &node.children[1..] {
        let child = &nodes[c];
        let shared: Vec<(usize, usize)> = child
            .vars
            .iter()
            .enumerate()
            .filter_map(|(ci, v)| vars.iter().position(|u| u == v).map(|ri| (ri, ci)))
            .collect();
        let fresh: Vec<usize> = (0..child.vars.len())
            .filter(|ci| !shared.iter().any(|&(_, s)| s == *ci))
            .collect();
        let mut table: HashMap<Binding, Vec<usize>> = HashMap::new();
        for (fi, b) in child.facts.iter().enumerate() {
            let key = shared.iter().map(|&(_, ci)| b[ci]).collect();
            table.entry(key).or_default().push(fi);
        }
        let mut next = Vec::new();
        for (row, parts) in &rows {
            let key: Binding = shared.iter().map(|&(ri, _)| row[ri]).collect();
            let Some(matches) = table.get(&key) else { continue };
            for &fi in matches {
                let mut b = row.clone();
                b.extend(fresh.iter().map(|&ci| child.facts[fi][ci]));
                let mut p = parts.clone();
                p.push(fi);
                next.push((b, p));
            }
        }
        vars.extend(fresh.iter().map(|&ci| child.vars[ci].clone()));
        rows = next;
    }
    rows.sort();
    let perm = permutation(&vars, &node.vars);
    let mut out = NodeFacts::new(node.vars.clone());
    let mut inter = Intermediates {
        vars,
        ..Default::default()
    };
    for (k, (b, parts)) in rows.into_iter().enumerate() {
        let head = project(&b, &perm);
        match out.find(&head) {
            Some(h) => match &mut out.lineage[h] {
                Lineage::And { intermediates } => intermediates.push(k),
                _ => unreachable!("conjunction lineage"),
            },
            None => {
                out.push(head, Lineage::And { intermediates: vec![k] });
            }
        }
        inter.facts.push(b);
        inter.parts.push(parts);
    }
    out.intermediates = Some(inter);
    out
}

fn or_facts(node: &TemplateNode, nodes: &[NodeFacts]) -> NodeFacts {
    let perms: Vec<Vec<usize>> = node
        .children
        .iter()
        .map(|&c| permutation(&nodes[c].vars, &node.vars))
        .collect();
    let mut all: BTreeSet<Binding> = BTreeSet::new();
    for (&c, perm) in node.children.iter().zip(&perms) {
        all.extend(nodes[c].facts.iter().map(|b| project(b, perm)));
    }
    let mut out = NodeFacts::new(node.vars.clone());
    for head in all {
        let children = node
            .children
            .iter()
            .map(|&c| {
                let back = permutation(&node.vars, &nodes[c].vars);
                nodes[c].find(&project(&head, &back))
            })
            .collect();
        out.push(head, Lineage::Or { children });
    }
    out
}

/// Constants observed at the argument positions where `var` occurs among the
/// leaves under `root`.
fn observed_constants(
    kb: &KnowledgeBase,
    template: &Template,
    root: usize,
    var: &str,
    domains: &[Vec<PredId>],
) -> BTreeSet<ConstId> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        let node = template.node(i);
        stack.extend(&node.children);
        let NodeKind::Leaf { .. } = node.kind else { continue };
        let Some(pos) = node.vars.iter().position(|v| v == var) else { continue };
        for pid in &domains[i] {
            out.extend(kb.facts(*pid).iter().map(|t| t[pos]));
        }
    }
    out
}

fn not_facts(
    kb: &KnowledgeBase,
    template: &Template,
    i: usize,
    nodes: &[NodeFacts],
    domains: &[Vec<PredId>],
) -> Result<NodeFacts, GroundError> {
    let node = template.node(i);
    let mut axes: Vec<Vec<ConstId>> = Vec::with_capacity(node.vars.len());
    for v in &node.vars {
        let axis: BTreeSet<ConstId> = match node.universe.get(v) {
            Some(names) => names
                .iter()
                .map(|n| {
                    kb.constant_id(n).ok_or_else(|| {
                        GroundError::Template(format!("node '{}': universe constant '{n}' is not in the KB", node.name))
                    })
                })
                .collect::<Result<_, _>>()?,
            None => observed_constants(kb, template, node.children[0], v, domains),
        };
        axes.push(axis.into_iter().collect());
    }
    let child = &nodes[node.children[0]];
    let back = permutation(&node.vars, &child.vars);
    let mut out = NodeFacts::new(node.vars.clone());
    if axes.iter().any(Vec::is_empty) {
        return Ok(out);
    }
    let mut idx = vec![0usize; axes.len()];
    loop {
        let head: Binding = idx.iter().zip(&axes).map(|(&k, a)| a[k]).collect();
        let c = child.find(&project(&head, &back));
        out.push(head, Lineage::Not { child: c });
        let mut d = axes.len();
        loop {
            if d == 0 {
                return Ok(out);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}
