//! Knowledge-base completion with one path-mixture rule per relation.
//!
//! Every relation sequence of length ≤ L that connects `h` to `t` in the
//! training graph is a binary feature of the pair. A relation's rule is an
//! LNN-pred over those features: `ψ = 1 − relu1(relu(β̂) − Σ relu(ŵ_p))`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Debug;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::{adagrad_update, margin_loss_grad, EpochRecord, FitReport, MiniBatch, TrainConfig, TrainError};

/// Appended to a relation name to form its inverse.
pub const INVERSE_SUFFIX: &str = "^-1";

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub h: EntityId,
    pub r: RelationId,
    pub t: EntityId,
}

impl Triple {
    pub fn new(h: EntityId, r: RelationId, t: EntityId) -> Self {
        Self { h, r, t }
    }
}

#[derive(Debug, Error)]
pub enum KbcError {
    #[error("dataset not found: {0}")]
    MissingDataset(PathBuf),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: expected head<TAB>relation<TAB>tail")]
    Parse { path: String, line: usize },
    #[error("graph is already augmented with inverse relations")]
    AlreadyAugmented,
    #[error("relation '{0}' collides with the reserved inverse suffix")]
    ReservedName(String),
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
    #[error("maximum rule length must be at least 1")]
    ZeroLength,
    #[error("path keys of length {len} over {relations} relations overflow 64 bits")]
    KeyOverflow { len: usize, relations: usize },
    #[error("the true candidate was filtered out")]
    TruthFiltered,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("AUC-PR needs at least one positive example")]
    NoPositives,
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// graph

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    raw_relations: Option<usize>,
}

fn parse_split(kg: &mut KnowledgeGraph, text: &str, path: &str) -> Result<Vec<Triple>, KbcError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
            return Err(KbcError::Parse {
                path: path.to_string(),
                line: i + 1,
            });
        }
        let t = Triple::new(kg.entity(parts[0]), kg.relation(parts[1]), kg.entity(parts[2]));
        if seen.insert(t) {
            out.push(t);
        }
    }
    Ok(out)
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads `train.txt`, `valid.txt` and `test.txt` from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, KbcError> {
        let dir = dir.as_ref();
        let mut texts = Vec::new();
        for split in ["train.txt", "valid.txt", "test.txt"] {
            let path = dir.join(split);
            if !path.is_file() {
                return Err(KbcError::MissingDataset(path));
            }
            let text = std::fs::read_to_string(&path).map_err(|e| KbcError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            texts.push((path.display().to_string(), text));
        }
        Self::from_splits(&texts[0].1, &texts[1].1, &texts[2].1).map_err(|e| match e {
            KbcError::Parse { line, path } if path.starts_with('<') => {
                let which = ["train", "valid", "test"].iter().position(|s| path.contains(s)).unwrap_or(0);
                KbcError::Parse {
                    path: texts[which].0.clone(),
                    line,
                }
            }
            other => other,
        })
    }

    pub fn from_splits(train: &str, valid: &str, test: &str) -> Result<Self, KbcError> {
        let mut kg = Self::new();
        kg.train = parse_split(&mut kg, train, "<train>")?;
        kg.valid = parse_split(&mut kg, valid, "<valid>")?;
        kg.test = parse_split(&mut kg, test, "<test>")?;
        Ok(kg)
    }

    pub fn entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = self.entities.len() as EntityId;
        self.entities.push(name.to_string());
        self.entity_index.insert(name.to_string(), id);
        id
    }

    pub fn relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = self.relations.len() as RelationId;
        self.relations.push(name.to_string());
        self.relation_index.insert(name.to_string(), id);
        id
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        &self.entities[e as usize]
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relations[r as usize]
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn is_augmented(&self) -> bool {
        self.raw_relations.is_some()
    }

    /// The inverse of `r` in an augmented graph.
    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        let n = self.raw_relations? as RelationId;
        Some(if r < n { r + n } else { r - n })
    }

    /// Adds `⟨t, r⁻¹, h⟩` for every triple in every split. Inverse relation
    /// `r⁻¹` gets id `r + |R|`.
    pub fn augment_inverses(&self) -> Result<Self, KbcError> {
        if self.is_augmented() {
            return Err(KbcError::AlreadyAugmented);
        }
        if let Some(bad) = self.relations.iter().find(|r| r.ends_with(INVERSE_SUFFIX)) {
            return Err(KbcError::ReservedName(bad.clone()));
        }
        let n = self.relations.len() as RelationId;
        let mut out = self.clone();
        for r in &self.relations {
            out.relation(&format!("{r}{INVERSE_SUFFIX}"));
        }
        let flip = |ts: &[Triple]| -> Vec<Triple> {
            ts.iter()
                .copied()
                .chain(ts.iter().map(|t| Triple::new(t.t, t.r + n, t.h)))
                .collect()
        };
        out.train = flip(&self.train);
        out.valid = flip(&self.valid);
        out.test = flip(&self.test);
        out.raw_relations = Some(n as usize);
        Ok(out)
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// Adjacency of the training edges.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    out: Vec<Vec<(RelationId, EntityId)>>,
    between: HashMap<(EntityId, EntityId), Vec<RelationId>>,
    edges: HashSet<Triple>,
    by_relation: Vec<Vec<Triple>>,
    num_relations: usize,
}

impl GraphIndex {
    pub fn new(num_entities: usize, num_relations: usize, triples: &[Triple]) -> Self {
        let mut out = vec![Vec::new(); num_entities];
        let mut between: HashMap<(EntityId, EntityId), Vec<RelationId>> = HashMap::new();
        let mut edges = HashSet::new();
        let mut by_relation = vec![Vec::new(); num_relations];
        for &tr in triples {
            if edges.insert(tr) {
                out[tr.h as usize].push((tr.r, tr.t));
                between.entry((tr.h, tr.t)).or_default().push(tr.r);
                by_relation[tr.r as usize].push(tr);
            }
        }
        for adj in &mut out {
            adj.sort_unstable();
        }
        for rs in between.values_mut() {
            rs.sort_unstable();
        }
        for ts in &mut by_relation {
            ts.sort_unstable();
        }
        Self {
            out,
            between,
            edges,
            by_relation,
            num_relations,
        }
    }

    pub fn from_train(kg: &KnowledgeGraph) -> Self {
        Self::new(kg.num_entities(), kg.num_relations(), &kg.train)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.edges.contains(t)
    }

    pub fn out(&self, h: EntityId) -> &[(RelationId, EntityId)] {
        &self.out[h as usize]
    }

    pub fn triples_of(&self, r: RelationId) -> &[Triple] {
        &self.by_relation[r as usize]
    }

    pub fn num_entities(&self) -> usize {
        self.out.len()
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }
}

// ---------------------------------------------------------------------------
// path features

/// A relation sequence packed as base-`(|R|+1)` digits, first hop least
/// significant.
pub type PathKey = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCodec {
    base: u64,
    max_len: usize,
}

impl PathCodec {
    pub fn new(num_relations: usize, max_len: usize) -> Result<Self, KbcError> {
        if max_len == 0 {
            return Err(KbcError::ZeroLength);
        }
        let base = num_relations as u64 + 1;
        let mut cap: u64 = 1;
        for _ in 0..max_len {
            cap = cap.checked_mul(base).ok_or(KbcError::KeyOverflow {
                len: max_len,
                relations: num_relations,
            })?;
        }
        Ok(Self { base, max_len })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Appends `r` to a prefix of length `depth`.
    pub fn extend(&self, prefix: PathKey, depth: usize, r: RelationId) -> PathKey {
        prefix + (r as u64 + 1) * self.base.pow(depth as u32)
    }

    pub fn encode(&self, rels: &[RelationId]) -> PathKey {
        rels.iter()
            .enumerate()
            .fold(0, |key, (d, &r)| self.extend(key, d, r))
    }

    pub fn decode(&self, mut key: PathKey) -> Vec<RelationId> {
        let mut out = Vec::new();
        while key > 0 {
            out.push((key % self.base - 1) as RelationId);
            key /= self.base;
        }
        out
    }
}

/// Edges hidden while computing features for a training pair.
pub type Excluded = [Option<Triple>; 2];

fn skip(excluded: &Excluded, h: EntityId, r: RelationId, t: EntityId) -> bool {
    excluded.iter().flatten().any(|e| e.h == h && e.r == r && e.t == t)
}

/// Distinct relation sequences of length ≤ L labelling a walk `h → t`,
/// sorted.
pub fn pair_features(index: &GraphIndex, codec: &PathCodec, h: EntityId, t: EntityId, excluded: &Excluded) -> Vec<PathKey> {
    let mut out = Vec::new();
    let mut stack: Vec<(EntityId, PathKey, usize)> = vec![(h, 0, 0)];
    while let Some((v, key, depth)) = stack.pop() {
        if let Some(rs) = index.between.get(&(v, t)) {
            for &r in rs {
                if !skip(excluded, v, r, t) {
                    out.push(codec.extend(key, depth, r));
                }
            }
        }
        if depth + 1 < codec.max_len {
            for &(r, u) in index.out(v) {
                if !skip(excluded, v, r, u) {
                    stack.push((u, codec.extend(key, depth, r), depth + 1));
                }
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// For every vertex reachable from `h` within L hops, the sorted distinct
/// relation sequences reaching it. When `prefixes` is given, only sequences
/// whose every prefix is in the set are expanded.
pub fn path_features(
    index: &GraphIndex,
    codec: &PathCodec,
    h: EntityId,
    prefixes: Option<&HashSet<PathKey>>,
) -> HashMap<EntityId, Vec<PathKey>> {
    let mut result: HashMap<EntityId, Vec<PathKey>> = HashMap::new();
    let mut frontier: Vec<(PathKey, EntityId)> = vec![(0, h)];
    for depth in 0..codec.max_len {
        let mut next: HashSet<(PathKey, EntityId)> = HashSet::new();
        for &(key, v) in &frontier {
            for &(r, u) in index.out(v) {
                let k = codec.extend(key, depth, r);
                if prefixes.is_some_and(|p| !p.contains(&k)) {
                    continue;
                }
                next.insert((k, u));
            }
        }
        for &(k, u) in &next {
            result.entry(u).or_default().push(k);
        }
        frontier = next.into_iter().collect();
    }
    for keys in result.values_mut() {
        keys.sort_unstable();
        keys.dedup();
    }
    result
}

// ---------------------------------------------------------------------------
// model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Slot {
    value: f64,
    acc: f64,
}

impl Slot {
    fn new(value: f64) -> Self {
        Self { value, acc: 0.0 }
    }
}

/// LNN-pred over path features for one relation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRule {
    beta_hat: Slot,
    #[serde(with = "sorted_pairs")]
    weights: HashMap<PathKey, Slot>,
}

/// Maps as key-sorted `[key, value]` lists: integer keys survive formats
/// that only allow string map keys.
mod sorted_pairs {
    use std::collections::HashMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::{PathKey, Slot};

    pub fn serialize<S: Serializer>(map: &HashMap<PathKey, Slot>, s: S) -> Result<S::Ok, S::Error> {
        let mut pairs: Vec<(&PathKey, &Slot)> = map.iter().collect();
        pairs.sort_by_key(|p| *p.0);
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<HashMap<PathKey, Slot>, D::Error> {
        Ok(Vec::<(PathKey, Slot)>::deserialize(d)?.into_iter().collect())
    }
}

impl RelationRule {
    pub fn new(beta_hat: f64) -> Self {
        Self {
            beta_hat: Slot::new(beta_hat),
            weights: HashMap::new(),
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta_hat.value.max(0.0)
    }

    pub fn weight(&self, key: PathKey) -> f64 {
        self.weights.get(&key).map_or(0.0, |s| s.value.max(0.0))
    }

    pub fn set_beta_hat(&mut self, v: f64) {
        self.beta_hat.value = v;
    }

    pub fn set_weight_hat(&mut self, key: PathKey, v: f64) {
        self.weights.entry(key).or_insert(Slot::new(0.0)).value = v;
    }

    /// Keys with a positive decoded weight.
    pub fn active_keys(&self) -> impl Iterator<Item = PathKey> + '_ {
        self.weights.iter().filter(|(_, s)| s.value > 0.0).map(|(&k, _)| k)
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// `relu(β̂) − Σ relu(ŵ)`; `features` must be sorted so sums are
    /// reproducible.
    fn pre_activation(&self, features: &[PathKey]) -> f64 {
        let evidence: f64 = features.iter().map(|&k| self.weight(k)).sum();
        self.beta() - evidence
    }

    pub fn score(&self, features: &[PathKey]) -> f64 {
        1.0 - self.pre_activation(features).clamp(0.0, 1.0)
    }

    fn grow(&mut self, features: &[PathKey], init: f64) {
        for &k in features {
            self.weights.entry(k).or_insert(Slot::new(init));
        }
    }

    /// Adds `dψ · ∂ψ/∂θ` into `grad` (`None` key is β̂).
    fn backprop(&self, features: &[PathKey], dpsi: f64, grad: &mut HashMap<Option<PathKey>, f64>) {
        let s = self.pre_activation(features);
        if dpsi == 0.0 || s <= 0.0 || s >= 1.0 {
            return;
        }
        // ψ = 1 − s on the linear piece
        let ds = -dpsi;
        if self.beta_hat.value > 0.0 {
            *grad.entry(None).or_insert(0.0) += ds;
        }
        for &k in features {
            if self.weights.get(&k).is_some_and(|w| w.value > 0.0) {
                *grad.entry(Some(k)).or_insert(0.0) -= ds;
            }
        }
    }

    fn apply(&mut self, grad: &HashMap<Option<PathKey>, f64>, step_size: f64) {
        for (k, &g) in grad {
            let slot = match k {
                None => &mut self.beta_hat,
                Some(k) => self.weights.get_mut(k).expect("grown before scoring"),
            };
            adagrad_update(&mut slot.value, &mut slot.acc, g, step_size, 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathModel {
    codec: PathCodec,
    rules: Vec<RelationRule>,
}

impl PathModel {
    pub fn new(num_relations: usize, max_len: usize, beta_init: f64) -> Result<Self, KbcError> {
        Ok(Self {
            codec: PathCodec::new(num_relations, max_len)?,
            rules: vec![RelationRule::new(beta_init); num_relations],
        })
    }

    pub fn codec(&self) -> &PathCodec {
        &self.codec
    }

    pub fn rule(&self, r: RelationId) -> &RelationRule {
        &self.rules[r as usize]
    }

    pub fn rule_mut(&mut self, r: RelationId) -> &mut RelationRule {
        &mut self.rules[r as usize]
    }

    pub fn num_relations(&self) -> usize {
        self.rules.len()
    }

    /// `ψ(r(h, t))` over the full training graph.
    pub fn score(&self, index: &GraphIndex, r: RelationId, h: EntityId, t: EntityId) -> Result<f64, KbcError> {
        let rule = self
            .rules
            .get(r as usize)
            .ok_or_else(|| KbcError::UnknownRelation(r.to_string()))?;
        Ok(rule.score(&pair_features(index, &self.codec, h, t, &[None, None])))
    }

    /// Every prefix of every positively weighted path of the given relations.
    fn prefixes(&self, relations: impl Iterator<Item = RelationId>) -> HashSet<PathKey> {
        let mut out = HashSet::new();
        for r in relations {
            for k in self.rules[r as usize].active_keys() {
                let rels = self.codec.decode(k);
                for len in 1..=rels.len() {
                    out.insert(self.codec.encode(&rels[..len]));
                }
            }
        }
        out
    }

    /// Paths with positive weight, heaviest first.
    pub fn export_rule(&self, kg: &KnowledgeGraph, r: RelationId, top: usize) -> ExportedRule {
        let rule = &self.rules[r as usize];
        let mut paths: Vec<(f64, PathKey)> = rule.active_keys().map(|k| (rule.weight(k), k)).collect();
        paths.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ExportedRule {
            relation: kg.relation_name(r).to_string(),
            beta: rule.beta(),
            paths: paths
                .into_iter()
                .take(top)
                .map(|(w, k)| WeightedPath {
                    path: self.codec.decode(k).into_iter().map(|r| kg.relation_name(r).to_string()).collect(),
                    weight: w,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPath {
    pub path: Vec<String>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRule {
    pub relation: String,
    pub beta: f64,
    pub paths: Vec<WeightedPath>,
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankStats {
    /// Candidates scored strictly higher than the truth.
    pub n: usize,
    /// Candidates tied with the truth, itself included.
    pub m: usize,
}

/// Filtered rank statistics. `scores[truth]` is the true candidate's score;
/// candidates with `filtered[c]` set are skipped.
pub fn rank_stats(scores: &[f64], truth: usize, filtered: impl Fn(usize) -> bool) -> Result<RankStats, KbcError> {
    if filtered(truth) {
        return Err(KbcError::TruthFiltered);
    }
    let s = scores[truth];
    let mut n = 0;
    let mut m = 0;
    for (c, &v) in scores.iter().enumerate() {
        if c != truth && filtered(c) {
            continue;
        }
        if v > s {
            n += 1;
        } else if v == s {
            m += 1;
        }
    }
    Ok(RankStats { n, m })
}

/// Mean over the tied ranks `n+1 … n+m` of `1/r` and of `[r ≤ K]`.
pub fn mrr_hits(stats: RankStats, k: usize) -> Result<(f64, f64), KbcError> {
    if k == 0 {
        return Err(KbcError::InvalidK);
    }
    let m = stats.m as f64;
    let rr: f64 = (stats.n + 1..=stats.n + stats.m).map(|r| 1.0 / r as f64).sum();
    let hits = (stats.n + stats.m).min(k).saturating_sub(stats.n) as f64;
    Ok((rr / m, hits / m))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MRR")]
    pub mrr: f64,
    #[serde(rename = "Hits@1")]
    pub hits1: f64,
    #[serde(rename = "Hits@3")]
    pub hits3: f64,
    #[serde(rename = "Hits@10")]
    pub hits10: f64,
    pub queries: usize,
}

impl Metrics {
    fn add(&mut self, stats: RankStats) {
        let (mrr, h1) = mrr_hits(stats, 1).expect("K ≥ 1");
        let (_, h3) = mrr_hits(stats, 3).expect("K ≥ 1");
        let (_, h10) = mrr_hits(stats, 10).expect("K ≥ 1");
        self.mrr += mrr;
        self.hits1 += h1;
        self.hits3 += h3;
        self.hits10 += h10;
        self.queries += 1;
    }

    fn merge(mut self, o: Metrics) -> Metrics {
        self.mrr += o.mrr;
        self.hits1 += o.hits1;
        self.hits3 += o.hits3;
        self.hits10 += o.hits10;
        self.queries += o.queries;
        self
    }

    fn averaged(self) -> Metrics {
        let q = self.queries.max(1) as f64;
        Metrics {
            mrr: self.mrr / q,
            hits1: self.hits1 / q,
            hits3: self.hits3 / q,
            hits10: self.hits10 / q,
            queries: self.queries,
        }
    }
}

/// Metrics are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbcReport {
    pub dataset: String,
    #[serde(flatten)]
    pub overall: Metrics,
    pub per_relation: BTreeMap<String, Metrics>,
}

/// Filtered, tie-aware evaluation of `queries` against every entity.
/// Known-true tails from all splits are filtered.
pub fn evaluate_kbc(model: &PathModel, kg: &KnowledgeGraph, index: &GraphIndex, queries: &[Triple], dataset: &str) -> KbcReport {
    let mut known: HashMap<(EntityId, RelationId), HashSet<EntityId>> = HashMap::new();
    for t in kg.all_triples() {
        known.entry((t.h, t.r)).or_default().insert(t.t);
    }
    let mut by_head: BTreeMap<EntityId, Vec<Triple>> = BTreeMap::new();
    for &q in queries {
        by_head.entry(q.h).or_default().push(q);
    }
    let heads: Vec<(EntityId, Vec<Triple>)> = by_head.into_iter().collect();
    let relations: HashSet<RelationId> = queries.iter().map(|q| q.r).collect();
    let prefixes = model.prefixes(relations.iter().copied());
    let n_ent = kg.num_entities();
    let per_head: Vec<Vec<(RelationId, RankStats)>> = heads
        .par_iter()
        .map(|(h, qs)| {
            let feats = path_features(index, &model.codec, *h, Some(&prefixes));
            let mut cache: HashMap<RelationId, Vec<f64>> = HashMap::new();
            qs.iter()
                .map(|q| {
                    let scores = cache.entry(q.r).or_insert_with(|| {
                        let rule = model.rule(q.r);
                        let base = rule.score(&[]);
                        let mut s = vec![base; n_ent];
                        for (&t, keys) in &feats {
                            s[t as usize] = rule.score(keys);
                        }
                        s
                    });
                    let known = &known[&(q.h, q.r)];
                    let stats = rank_stats(scores, q.t as usize, |c| known.contains(&(c as EntityId)) && c != q.t as usize)
                        .expect("truth is never filtered");
                    (q.r, stats)
                })
                .collect()
        })
        .collect();
    let mut overall = Metrics::default();
    let mut per: BTreeMap<String, Metrics> = BTreeMap::new();
    for (r, stats) in per_head.into_iter().flatten() {
        overall.add(stats);
        per.entry(kg.relation_name(r).to_string()).or_default().add(stats);
    }
    KbcReport {
        dataset: dataset.to_string(),
        overall: overall.averaged(),
        per_relation: per.into_iter().map(|(k, v)| (k, v.merge(Metrics::default()).averaged())).collect(),
    }
}

/// Area under the step-wise precision-recall curve, ×100. Examples with
/// equal scores enter the curve together.
pub fn auc_pr(examples: &[(f64, bool)]) -> Result<f64, KbcError> {
    let positives = examples.iter().filter(|e| e.1).count();
    if positives == 0 {
        return Err(KbcError::NoPositives);
    }
    let mut sorted = examples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(100.0 * area)
}

// ---------------------------------------------------------------------------
// training

/// Draws negative `(h, t)` pairs for a relation.
pub trait NegativeSampler: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(
        &self,
        index: &GraphIndex,
        r: RelationId,
        positives: &[Triple],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Triple>, TrainError>;
}

fn rejection_sample(
    index: &GraphIndex,
    r: RelationId,
    count: usize,
    rng: &mut dyn RngCore,
    mut propose: impl FnMut(&mut dyn RngCore) -> (EntityId, EntityId),
) -> Result<Vec<Triple>, TrainError> {
    let budget = 100 * count.max(1);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        if tries == budget {
            return Err(TrainError::NegativesExhausted {
                relation: r.to_string(),
                tries,
            });
        }
        tries += 1;
        let (h, t) = propose(rng);
        let cand = Triple::new(h, r, t);
        if !index.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Uniform over `V × V` minus the training edges of the relation.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

/// Keeps the head of a positive and draws a random tail.
#[derive(Debug, Clone, Copy, Default)]
pub struct CorruptTailSampler;

impl NegativeSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(
        &self,
        index: &GraphIndex,
        r: RelationId,
        _positives: &[Triple],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Triple>, TrainError> {
        let n = index.num_entities() as EntityId;
        rejection_sample(index, r, count, rng, |rng| (rng.random_range(0..n), rng.random_range(0..n)))
    }
}

impl NegativeSampler for CorruptTailSampler {
    fn name(&self) -> &'static str {
        "corrupt-tail"
    }

    fn sample(
        &self,
        index: &GraphIndex,
        r: RelationId,
        positives: &[Triple],
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<Triple>, TrainError> {
        let n = index.num_entities() as EntityId;
        let mut k = 0;
        rejection_sample(index, r, count, rng, |rng| {
            let h = positives[k % positives.len()].h;
            k += 1;
            (h, rng.random_range(0..n))
        })
    }
}

/// Uniform positives of `r` plus as many negatives from `sampler`.
pub fn sample_batch(
    index: &GraphIndex,
    r: RelationId,
    batch_size: usize,
    sampler: &dyn NegativeSampler,
    rng: &mut dyn RngCore,
) -> Result<MiniBatch<Triple>, TrainError> {
    if r as usize >= index.num_relations() {
        return Err(TrainError::UnknownRelation(r.to_string()));
    }
    let pool = index.triples_of(r);
    if pool.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let positives: Vec<Triple> = (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    let negatives = sampler.sample(index, r, &positives, batch_size, rng)?;
    Ok(MiniBatch { positives, negatives })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub max_len: usize,
    pub beta_init: f64,
    pub weight_init: f64,
    /// Validation queries used for early stopping; `None` uses all.
    pub val_limit: Option<usize>,
}

impl Default for PathTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            max_len: 3,
            beta_init: 1.0,
            weight_init: 0.01,
            val_limit: None,
        }
    }
}

struct RelationState {
    rng: ChaCha8Rng,
    /// Features of each positive with its own edge hidden.
    cache: HashMap<Triple, Vec<PathKey>>,
}

fn hidden(kg: &KnowledgeGraph, t: Triple) -> Excluded {
    [Some(t), kg.inverse(t.r).map(|ri| Triple::new(t.t, ri, t.h))]
}

#[allow(clippy::too_many_arguments)]
fn train_relation_epoch(
    rule: &mut RelationRule,
    state: &mut RelationState,
    kg: &KnowledgeGraph,
    index: &GraphIndex,
    codec: &PathCodec,
    r: RelationId,
    cfg: &PathTrainConfig,
    sampler: &dyn NegativeSampler,
) -> Result<(f64, usize), TrainError> {
    let n = index.triples_of(r).len();
    if n == 0 {
        return Ok((0.0, 0));
    }
    let steps = n.div_ceil(cfg.train.batch_size);
    let mut total = 0.0;
    for _ in 0..steps {
        let batch = sample_batch(index, r, cfg.train.batch_size, sampler, &mut state.rng)?;
        let pos: Vec<Vec<PathKey>> = batch
            .positives
            .iter()
            .map(|&t| {
                state
                    .cache
                    .entry(t)
                    .or_insert_with(|| pair_features(index, codec, t.h, t.t, &hidden(kg, t)))
                    .clone()
            })
            .collect();
        let neg: Vec<Vec<PathKey>> = batch
            .negatives
            .iter()
            .map(|t| pair_features(index, codec, t.h, t.t, &[None, None]))
            .collect();
        for f in pos.iter().chain(&neg) {
            rule.grow(f, cfg.weight_init);
        }
        let sp: Vec<f64> = pos.iter().map(|f| rule.score(f)).collect();
        let sn: Vec<f64> = neg.iter().map(|f| rule.score(f)).collect();
        let (loss, dp, dn) = margin_loss_grad(&sp, &sn, cfg.train.margin)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { epoch: 0, step: 0 });
        }
        total += loss;
        let mut grad = HashMap::new();
        for (f, d) in pos.iter().zip(&dp).chain(neg.iter().zip(&dn)) {
            rule.backprop(f, *d, &mut grad);
        }
        rule.apply(&grad, cfg.train.step_size);
    }
    Ok((total, steps))
}

/// Trains every relation's rule independently (in parallel), selecting the
/// epoch with the best validation MRR (the later one on ties).
pub fn train_paths(
    kg: &KnowledgeGraph,
    cfg: &PathTrainConfig,
    sampler: Arc<dyn NegativeSampler>,
) -> Result<(PathModel, FitReport), KbcError> {
    cfg.train.validate()?;
    let index = GraphIndex::from_train(kg);
    let mut model = PathModel::new(kg.num_relations(), cfg.max_len, cfg.beta_init)?;
    let codec = model.codec;
    let mut states: Vec<RelationState> = (0..kg.num_relations())
        .map(|r| RelationState {
            rng: ChaCha8Rng::seed_from_u64(cfg.train.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            cache: HashMap::new(),
        })
        .collect();
    let val: Vec<Triple> = match cfg.val_limit {
        Some(k) => kg.valid.iter().copied().take(k).collect(),
        None => kg.valid.clone(),
    };
    let mut report = FitReport::default();
    let mut best: Option<(f64, Vec<RelationRule>)> = None;
    let mut stale = 0;
    let start = std::time::Instant::now();
    for epoch in 1..=cfg.train.epochs {
        let results: Vec<Result<(f64, usize), TrainError>> = model
            .rules
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .enumerate()
            .map(|(r, (rule, state))| {
                train_relation_epoch(rule, state, kg, &index, &codec, r as RelationId, cfg, sampler.as_ref())
            })
            .collect();
        let (mut loss, mut steps) = (0.0, 0);
        for res in results {
            let (l, s) = res.map_err(|e| match e {
                TrainError::NonFinite { step, .. } => TrainError::NonFinite { epoch, step },
                other => other,
            })?;
            loss += l;
            steps += s;
        }
        let val_mrr = (!val.is_empty()).then(|| evaluate_kbc(&model, kg, &index, &val, "valid").overall.mrr);
        let record = EpochRecord {
            epoch,
            loss: loss / steps.max(1) as f64,
            val_metric: val_mrr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} valid MRR {:?} ({:.1}s)",
            record.loss,
            record.val_metric,
            record.seconds
        );
        report.trace.push(record);
        if let Some(v) = val_mrr {
            if best.as_ref().is_none_or(|(b, _)| v >= *b) {
                best = Some((v, model.rules.clone()));
                report.best_epoch = Some(epoch);
                report.best_metric = Some(v);
                stale = 0;
            } else {
                stale += 1;
                if cfg.train.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, rules)) = best {
        model.rules = rules;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> KnowledgeGraph {
        KnowledgeGraph::from_splits("1\tA\t2\n1\tA\t5\n1\tB\t2\n2\tC\t5\n", "", "").unwrap()
    }

    #[test]
    fn augmentation_doubles_and_is_not_repeatable() {
        let kg = toy();
        let aug = kg.augment_inverses().unwrap();
        assert_eq!(aug.num_relations(), 6);
        assert_eq!(aug.train.len(), 8);
        assert_eq!(aug.relation_name(3), "A^-1");
        assert_eq!(aug.inverse(0), Some(3));
        assert_eq!(aug.inverse(3), Some(0));
        assert!(matches!(aug.augment_inverses(), Err(KbcError::AlreadyAugmented)));
        let empty = KnowledgeGraph::new().augment_inverses().unwrap();
        assert_eq!((empty.num_relations(), empty.train.len()), (0, 0));
        let clash = KnowledgeGraph::from_splits("a\tr^-1\tb\n", "", "").unwrap();
        assert!(matches!(clash.augment_inverses(), Err(KbcError::ReservedName(_))));
    }

    #[test]
    fn toy_paths() {
        let kg = toy();
        let index = GraphIndex::from_train(&kg);
        let codec = PathCodec::new(kg.num_relations(), 2).unwrap();
        let feats = path_features(&index, &codec, kg.entity_id("1").unwrap(), None);
        let a = kg.relation_id("A").unwrap();
        let c = kg.relation_id("C").unwrap();
        let two = kg.entity_id("2").unwrap();
        let five = kg.entity_id("5").unwrap();
        assert!(feats[&two].contains(&codec.encode(&[a])));
        assert!(feats[&five].contains(&codec.encode(&[a, c])));
        assert!(path_features(&index, &codec, five, None).is_empty());
        let pair = pair_features(&index, &codec, kg.entity_id("1").unwrap(), five, &[None, None]);
        assert_eq!(pair, feats[&five]);
    }

    #[test]
    fn codec_round_trip() {
        let codec = PathCodec::new(98, 3).unwrap();
        for rels in [vec![0], vec![97, 0, 42], vec![5, 5]] {
            assert_eq!(codec.decode(codec.encode(&rels)), rels);
        }
        assert!(PathCodec::new(10, 0).is_err());
        assert!(PathCodec::new(1000, 7).is_err());
    }

    #[test]
    fn excluded_edge_is_invisible() {
        let kg = toy().augment_inverses().unwrap();
        let index = GraphIndex::from_train(&kg);
        let codec = PathCodec::new(kg.num_relations(), 1).unwrap();
        let (h, t) = (kg.entity_id("1").unwrap(), kg.entity_id("5").unwrap());
        let a = kg.relation_id("A").unwrap();
        let tr = Triple::new(h, a, t);
        assert_eq!(pair_features(&index, &codec, h, t, &[None, None]), vec![codec.encode(&[a])]);
        assert!(pair_features(&index, &codec, h, t, &hidden(&kg, tr)).is_empty());
    }

    #[test]
    fn score_examples() {
        let mut rule = RelationRule::new(0.0);
        assert_eq!(rule.score(&[]), 1.0);
        rule.set_beta_hat(1.0);
        assert_eq!(rule.score(&[]), 0.0);
        rule.set_weight_hat(7, 2.0);
        assert_eq!(rule.score(&[7]), 1.0);
    }

    #[test]
    fn rank_examples() {
        let s = [0.9, 0.9, 0.9];
        assert_eq!(rank_stats(&s, 2, |_| false).unwrap(), RankStats { n: 0, m: 3 });
        let s = [1.0, 0.5, 0.1];
        assert_eq!(rank_stats(&s, 1, |c| c == 0).unwrap(), RankStats { n: 0, m: 1 });
        let s = [0.2, 0.8, 0.1];
        assert_eq!(rank_stats(&s, 1, |_| false).unwrap(), RankStats { n: 0, m: 1 });
        assert!(rank_stats(&s, 1, |c| c == 1).is_err());
    }

    #[test]
    fn mrr_examples() {
        assert_eq!(mrr_hits(RankStats { n: 0, m: 1 }, 1).unwrap(), (1.0, 1.0));
        assert_eq!(mrr_hits(RankStats { n: 0, m: 2 }, 1).unwrap(), (0.75, 0.5));
        let (mrr, hits) = mrr_hits(RankStats { n: 3, m: 2 }, 3).unwrap();
        assert_relative_eq!(mrr, 0.225, epsilon = 1e-15);
        assert_eq!(hits, 0.0);
        assert!(mrr_hits(RankStats { n: 0, m: 1 }, 0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_pr(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 100.0);
        let mut last = vec![(0.0, true)];
        last.extend((1..10).map(|i| (i as f64, false)));
        assert_relative_eq!(auc_pr(&last).unwrap(), 10.0, epsilon = 1e-12);
        assert!(auc_pr(&[(0.5, false)]).is_err());
    }

    #[test]
    fn dense_relation_exhausts_negatives() {
        let mut text = String::new();
        for h in 0..3 {
            for t in 0..3 {
                text.push_str(&format!("{h}\tr\t{t}\n"));
            }
        }
        let kg = KnowledgeGraph::from_splits(&text, "", "").unwrap();
        let index = GraphIndex::from_train(&kg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_batch(&index, 0, 8, &UniformSampler, &mut rng).unwrap_err();
        assert!(matches!(err, TrainError::NegativesExhausted { tries: 800, .. }));
    }

    #[test]
    fn batches_are_balanced_and_seeded() {
        let kg = toy();
        let index = GraphIndex::from_train(&kg);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_batch(&index, 0, 8, &UniformSampler, &mut rng).unwrap()
        };
        let b = draw(3);
        assert_eq!((b.positives.len(), b.negatives.len()), (8, 8));
        assert!(b.negatives.iter().all(|t| !index.contains(t)));
        assert_eq!(b, draw(3));
    }
}
