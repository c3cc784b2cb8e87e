use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use super::GroundError;

pub type ConstId = u32;
pub type PredId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub name: String,
    pub arity: usize,
}

/// Base facts, all with truth value 1.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    constants: Vec<String>,
    const_index: HashMap<String, ConstId>,
    predicates: Vec<Predicate>,
    pred_index: HashMap<String, PredId>,
    facts: Vec<BTreeSet<Vec<ConstId>>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
    pub fn from_triples_str(text: &str) -> Result<Self, GroundError> {
        let mut kb = Self::new();
        kb.extend_triples_str(text, "<string>")?;
        Ok(kb)
    }

    pub fn extend_triples_str(&mut self, text: &str, source: &str) -> Result<(), GroundError> {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 || parts.iter().any(|p| p.trim().is_empty()) {
                return Err(GroundError::Parse {
                    origin: source.to_string(),
                    line: i + 1,
                    message: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
                });
            }
            self.add_fact(parts[1].trim(), &[parts[0].trim(), parts[2].trim()])?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GroundError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GroundError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut kb = Self::new();
        kb.extend_triples_str(&text, &path.display().to_string())?;
        Ok(kb)
    }

    pub fn intern(&mut self, name: &str) -> ConstId {
        if let Some(&id) = self.const_index.get(name) {
            return id;
        }
        let id = self.constants.len() as ConstId;
        self.constants.push(name.to_string());
        self.const_index.insert(name.to_string(), id);
        id
    }

    pub fn declare(&mut self, name: &str, arity: usize) -> Result<PredId, GroundError> {
        if let Some(&pid) = self.pred_index.get(name) {
            let have = self.predicates[pid].arity;
            if have != arity {
                return Err(GroundError::ArityMismatch {
                    predicate: name.to_string(),
                    expected: have,
                    got: arity,
                });
            }
            return Ok(pid);
        }
        let pid = self.predicates.len();
        self.predicates.push(Predicate {
            name: name.to_string(),
            arity,
        });
        self.pred_index.insert(name.to_string(), pid);
        self.facts.push(BTreeSet::new());
        Ok(pid)
    }

    /// Returns whether the fact was new.
    pub fn add_fact(&mut self, predicate: &str, args: &[&str]) -> Result<bool, GroundError> {
        let pid = self.declare(predicate, args.len())?;
        let tuple = args.iter().map(|a| self.intern(a)).collect();
        Ok(self.facts[pid].insert(tuple))
    }

    pub fn remove_fact(&mut self, predicate: &str, args: &[&str]) -> bool {
        let (Some(&pid), Some(tuple)) = (self.pred_index.get(predicate), self.tuple(args)) else {
            return false;
        };
        self.facts[pid].remove(&tuple)
    }

    pub fn contains(&self, predicate: &str, args: &[&str]) -> bool {
        match (self.pred_index.get(predicate), self.tuple(args)) {
            (Some(&pid), Some(tuple)) => self.facts[pid].contains(&tuple),
            _ => false,
        }
    }

    fn tuple(&self, args: &[&str]) -> Option<Vec<ConstId>> {
        args.iter().map(|a| self.const_index.get(*a).copied()).collect()
    }

    pub fn constant_id(&self, name: &str) -> Option<ConstId> {
        self.const_index.get(name).copied()
    }

    pub fn constant_name(&self, id: ConstId) -> &str {
        &self.constants[id as usize]
    }

    pub fn constants(&self) -> &[String] {
        &self.constants
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredId> {
        self.pred_index.get(name).copied()
    }

    pub fn predicate(&self, pid: PredId) -> &Predicate {
        &self.predicates[pid]
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn facts(&self, pid: PredId) -> &BTreeSet<Vec<ConstId>> {
        &self.facts[pid]
    }

    pub fn num_facts(&self) -> usize {
        self.facts.iter().map(BTreeSet::len).sum()
    }

    pub fn names(&self, tuple: &[ConstId]) -> Vec<String> {
        tuple.iter().map(|&c| self.constant_name(c).to_string()).collect()
    }
}
