//! Name-keyed lookup of interchangeable strategies.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::kbc::{CorruptTailSampler, NegativeSampler, UniformSampler};
use crate::operators::{
    AttentionCombiner, Connective, LeafCombiner, LnnConnective, LnnPredCombiner, LukasiewiczConnective,
    ProductConnective,
};
use crate::polytope::{ActiveSetEnumeration, DoubleDescription, VertexEnumerator};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {family} '{name}' (known: {known})")]
pub struct UnknownStrategy {
    pub family: &'static str,
    pub name: String,
    pub known: String,
}

#[derive(Debug)]
struct Family<T: ?Sized> {
    label: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Clone for Family<T> {
    fn clone(&self) -> Self {
        Self {
            label: self.label,
            entries: self.entries.clone(),
        }
    }
}

impl<T: ?Sized> Family<T> {
    fn new(label: &'static str) -> Self {
        Self {
            label,
            entries: BTreeMap::new(),
        }
    }

    fn get(&self, name: &str) -> Result<Arc<T>, UnknownStrategy> {
        self.entries.get(name).cloned().ok_or_else(|| UnknownStrategy {
            family: self.label,
            name: name.to_string(),
            known: self.entries.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Registered leaf combiners, connectives, H→V converters and negative
/// samplers.
#[derive(Debug, Clone)]
pub struct Registry {
    combiners: Family<dyn LeafCombiner>,
    connectives: Family<dyn Connective>,
    enumerators: Family<dyn VertexEnumerator>,
    samplers: Family<dyn NegativeSampler>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            combiners: Family::new("leaf combiner"),
            connectives: Family::new("connective"),
            enumerators: Family::new("vertex enumerator"),
            samplers: Family::new("negative sampler"),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_combiner(Arc::new(LnnPredCombiner::default()));
        r.register_combiner(Arc::new(AttentionCombiner::default()));
        let active: Arc<dyn VertexEnumerator> = Arc::new(ActiveSetEnumeration);
        r.register_enumerator(active.clone());
        r.register_enumerator(Arc::new(DoubleDescription));
        r.register_connective(Arc::new(LnnConnective::new(active)));
        r.register_connective(Arc::new(ProductConnective));
        r.register_connective(Arc::new(LukasiewiczConnective));
        r.register_sampler(Arc::new(UniformSampler));
        r.register_sampler(Arc::new(CorruptTailSampler));
        r
    }

    pub fn register_combiner(&mut self, c: Arc<dyn LeafCombiner>) {
        self.combiners.entries.insert(c.name().to_string(), c);
    }

    pub fn register_connective(&mut self, c: Arc<dyn Connective>) {
        self.connectives.entries.insert(c.name().to_string(), c);
    }

    pub fn register_enumerator(&mut self, e: Arc<dyn VertexEnumerator>) {
        self.enumerators.entries.insert(e.name().to_string(), e);
    }

    pub fn register_sampler(&mut self, s: Arc<dyn NegativeSampler>) {
        self.samplers.entries.insert(s.name().to_string(), s);
    }

    pub fn combiner(&self, name: &str) -> Result<Arc<dyn LeafCombiner>, UnknownStrategy> {
        self.combiners.get(name)
    }

    pub fn connective(&self, name: &str) -> Result<Arc<dyn Connective>, UnknownStrategy> {
        self.connectives.get(name)
    }

    pub fn enumerator(&self, name: &str) -> Result<Arc<dyn VertexEnumerator>, UnknownStrategy> {
        self.enumerators.get(name)
    }

    pub fn sampler(&self, name: &str) -> Result<Arc<dyn NegativeSampler>, UnknownStrategy> {
        self.samplers.get(name)
    }

    pub fn combiner_names(&self) -> Vec<&str> {
        self.combiners.names()
    }

    pub fn connective_names(&self) -> Vec<&str> {
        self.connectives.names()
    }

    pub fn enumerator_names(&self) -> Vec<&str> {
        self.enumerators.names()
    }

    pub fn sampler_names(&self) -> Vec<&str> {
        self.samplers.names()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_resolve() {
        let r = Registry::with_builtins();
        assert_eq!(r.combiner("attention").unwrap().name(), "attention");
        assert_eq!(r.connective("lnn").unwrap().name(), "lnn");
        assert_eq!(r.enumerator("double-description").unwrap().name(), "double-description");
        assert_eq!(r.combiner_names(), vec!["attention", "lnn-pred"]);
        assert_eq!(r.sampler_names(), vec!["corrupt-tail", "uniform"]);
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let err = Registry::with_builtins().connective("godel").unwrap_err();
        assert_eq!(err.known, "lnn, lukasiewicz, product");
        assert!(err.to_string().contains("godel"));
    }
}
