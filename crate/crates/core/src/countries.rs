//! The Countries benchmark: world geography as `locatedIn`/`neighborOf`
//! facts, three splits of increasing difficulty, and template-mode training
//! scored by AUC-PR over held-out `locatedIn(country, region)` queries.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounder::{GroundError, GroundNetwork, KnowledgeBase, NodeOp, Template, TemplateModel, TemplateSpec};
use crate::kbc::{auc_pr, KbcError};
use crate::operators::{AlphaConfig, Connective, LeafCombiner};
use crate::train::{fit, Example, FitReport, Loss, TapeObjective, TrainConfig, TrainError};

pub const LOCATED_IN: &str = "locatedIn";
pub const NEIGHBOR_OF: &str = "neighborOf";

/// Countries held out per evaluation split.
pub const HELD_OUT: usize = 20;

#[derive(Debug, Error)]
pub enum CountriesError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("world table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("only {available} countries qualify for held-out splits, need {needed}")]
    TooFewCandidates { available: usize, needed: usize },
    #[error("dataset not found: {0}")]
    MissingDataset(String),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Kbc(#[from] KbcError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Country {
    pub code: String,
    pub region: String,
    pub subregion: String,
    pub borders: Vec<String>,
}

/// Countries with a region and subregion; borders are symmetric and refer
/// only to listed countries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct World {
    countries: Vec<Country>,
}

impl World {
    /// Parses `code<TAB>region<TAB>subregion<TAB>comma-separated borders`.
    /// Rows without a region or subregion are dropped along with any border
    /// pointing at them.
    pub fn parse(text: &str) -> Result<Self, CountriesError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 || cols[0].trim().is_empty() {
                return Err(CountriesError::Parse {
                    line: i + 1,
                    message: format!("expected 4 tab-separated columns, got {}", cols.len()),
                });
            }
            rows.push(cols.iter().map(|c| c.trim().to_string()).collect::<Vec<_>>());
        }
        let kept: BTreeSet<&str> = rows
            .iter()
            .filter(|r| !r[1].is_empty() && !r[2].is_empty())
            .map(|r| r[0].as_str())
            .collect();
        let mut borders: BTreeMap<&str, BTreeSet<&str>> = kept.iter().map(|&c| (c, BTreeSet::new())).collect();
        for r in &rows {
            if !kept.contains(r[0].as_str()) {
                continue;
            }
            for b in r[3].split(',').map(str::trim).filter(|b| kept.contains(b) && *b != r[0]) {
                borders.get_mut(r[0].as_str()).expect("kept").insert(b);
                borders.get_mut(b).expect("kept").insert(r[0].as_str());
            }
        }
        let countries = rows
            .iter()
            .filter(|r| kept.contains(r[0].as_str()))
            .map(|r| Country {
                code: r[0].clone(),
                region: r[1].clone(),
                subregion: r[2].clone(),
                borders: borders[r[0].as_str()].iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Ok(Self { countries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CountriesError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CountriesError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn countries(&self) -> &[Country] {
        &self.countries
    }

    pub fn country(&self, code: &str) -> Option<&Country> {
        self.countries.iter().find(|c| c.code == code)
    }

    pub fn regions(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.countries.iter().map(|c| &c.region).collect();
        set.into_iter().cloned().collect()
    }

    pub fn subregions(&self) -> BTreeMap<String, String> {
        self.countries
            .iter()
            .map(|c| (c.subregion.clone(), c.region.clone()))
            .collect()
    }

    /// Every fact of the full graph as `(head, relation, tail)`.
    pub fn facts(&self) -> Vec<[String; 3]> {
        let mut out = Vec::new();
        for c in &self.countries {
            out.push([c.code.clone(), LOCATED_IN.into(), c.subregion.clone()]);
            out.push([c.code.clone(), LOCATED_IN.into(), c.region.clone()]);
            for b in &c.borders {
                out.push([c.code.clone(), NEIGHBOR_OF.into(), b.clone()]);
            }
        }
        for (s, r) in self.subregions() {
            out.push([s, LOCATED_IN.into(), r]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    S1,
    S2,
    S3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::S1, Task::S2, Task::S3];

    pub fn name(self) -> &'static str {
        match self {
            Task::S1 => "S1",
            Task::S2 => "S2",
            Task::S3 => "S3",
        }
    }

    /// `S(X,Z) ← P(X,Y) ∧ Q(Y,Z)` for S1/S2; a three-atom chain for S3.
    /// Every leaf ranges over both predicates.
    /// Atoms in the target rule's body.
    pub fn body_len(self) -> usize {
        match self {
            Task::S1 | Task::S2 => 2,
            Task::S3 => 3,
        }
    }

    pub fn template(self) -> TemplateSpec {
        let dom = [LOCATED_IN, NEIGHBOR_OF];
        let body = match self {
            Task::S1 | Task::S2 => vec![
                TemplateSpec::leaf("P", &["X", "Y"], &dom),
                TemplateSpec::leaf("Q", &["Y", "Z"], &dom),
            ],
            Task::S3 => vec![
                TemplateSpec::leaf("P", &["X", "W"], &dom),
                TemplateSpec::leaf("Q", &["W", "Y"], &dom),
                TemplateSpec::leaf("O", &["Y", "Z"], &dom),
            ],
        };
        TemplateSpec::internal("S", &["X", "Z"], NodeOp::And, body)
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Task::S1),
            "S2" => Ok(Task::S2),
            "S3" => Ok(Task::S3),
            _ => Err(format!("unknown Countries task '{s}' (expected S1, S2 or S3)")),
        }
    }
}

/// One task's training graph and held-out `locatedIn(country, region)`
/// queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountriesSplit {
    pub train: Vec<[String; 3]>,
    pub valid: Vec<[String; 3]>,
    pub test: Vec<[String; 3]>,
    pub regions: Vec<String>,
}

/// Picks `2·HELD_OUT` countries (valid first, then test). Each keeps a
/// neighbor outside the held-out set and a two-hop neighbor whose
/// `locatedIn` facts survive every task.
pub fn choose_held_out(world: &World, seed: u64) -> Result<(Vec<String>, Vec<String>), CountriesError> {
    let mut candidates: Vec<&Country> = world.countries().iter().filter(|c| !c.borders.is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let needed = 2 * HELD_OUT;
    let borders = |code: &str| &world.country(code).expect("listed").borders;
    let admissible = |chosen: &BTreeSet<&str>| {
        let hidden: BTreeSet<&str> = chosen
            .iter()
            .flat_map(|&h| borders(h).iter().map(String::as_str))
            .chain(chosen.iter().copied())
            .collect();
        chosen.iter().all(|&h| {
            borders(h).iter().any(|b| !chosen.contains(b.as_str()))
                && borders(h)
                    .iter()
                    .flat_map(|w| borders(w))
                    .any(|y| !hidden.contains(y.as_str()))
        })
    };
    let mut chosen: BTreeSet<&str> = BTreeSet::new();
    let mut order = Vec::new();
    for c in candidates {
        if order.len() == needed {
            break;
        }
        chosen.insert(&c.code);
        if admissible(&chosen) {
            order.push(c.code.clone());
        } else {
            chosen.remove(c.code.as_str());
        }
    }
    if order.len() < needed {
        return Err(CountriesError::TooFewCandidates {
            available: order.len(),
            needed,
        });
    }
    let test = order.split_off(HELD_OUT);
    Ok((order, test))
}

/// Whether `task` hides fact `f` when `held` are the held-out countries and
/// `near` their neighbors outside `held`.
fn hidden(task: Task, f: &[String; 3], held: &BTreeSet<&str>, near: &BTreeSet<&str>, regions: &BTreeSet<&str>) -> bool {
    if f[1] != LOCATED_IN {
        return false;
    }
    let s = f[0].as_str();
    if held.contains(s) {
        return task != Task::S1 || regions.contains(f[2].as_str());
    }
    task == Task::S3 && near.contains(s)
}

/// Neighbors of `held` outside it, read from `neighborOf` facts.
fn near<'a>(facts: &'a [[String; 3]], held: &BTreeSet<&str>) -> BTreeSet<&'a str> {
    facts
        .iter()
        .filter(|f| f[1] == NEIGHBOR_OF && held.contains(f[0].as_str()) && !held.contains(f[2].as_str()))
        .map(|f| f[2].as_str())
        .collect()
}

/// Builds a task split. S1 hides the held-out countries' region facts; S2
/// also hides their subregion facts; S3 additionally hides every
/// `locatedIn` fact of their neighbors.
pub fn make_split(world: &World, task: Task, seed: u64) -> Result<CountriesSplit, CountriesError> {
    let (valid, test) = choose_held_out(world, seed)?;
    let held: BTreeSet<&str> = valid.iter().chain(&test).map(String::as_str).collect();
    let regions = world.regions();
    let region_set: BTreeSet<&str> = regions.iter().map(String::as_str).collect();
    let facts = world.facts();
    let near = near(&facts, &held);
    let train = facts
        .iter()
        .filter(|f| !hidden(task, f, &held, &near, &region_set))
        .cloned()
        .collect();
    let query = |codes: &[String]| {
        codes
            .iter()
            .map(|c| [c.clone(), LOCATED_IN.into(), world.country(c).expect("listed").region.clone()])
            .collect()
    };
    Ok(CountriesSplit {
        train,
        valid: query(&valid),
        test: query(&test),
        regions,
    })
}

fn facts_kb(facts: &[[String; 3]]) -> Result<KnowledgeBase, CountriesError> {
    let mut kb = KnowledgeBase::new();
    kb.declare(LOCATED_IN, 2)?;
    kb.declare(NEIGHBOR_OF, 2)?;
    for f in facts {
        kb.add_fact(&f[1], &[&f[0], &f[2]])?;
    }
    Ok(kb)
}

fn tsv(facts: &[[String; 3]]) -> String {
    facts.iter().map(|f| format!("{}\t{}\t{}\n", f[0], f[1], f[2])).collect()
}

fn read_tsv(path: &Path) -> Result<Vec<[String; 3]>, CountriesError> {
    let text = std::fs::read_to_string(path).map_err(|e| CountriesError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let p: Vec<&str> = l.split('\t').map(str::trim).collect();
            if p.len() != 3 {
                return Err(CountriesError::Parse {
                    line: i + 1,
                    message: format!("{}: expected head<TAB>relation<TAB>tail", path.display()),
                });
            }
            Ok([p[0].to_string(), p[1].to_string(), p[2].to_string()])
        })
        .collect()
}

impl CountriesSplit {
    /// Writes `train.txt`, `valid.txt` and `test.txt`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), CountriesError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| CountriesError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        for (name, facts) in [("train.txt", &self.train), ("valid.txt", &self.valid), ("test.txt", &self.test)] {
            std::fs::write(dir.join(name), tsv(facts)).map_err(io)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`CountriesSplit::save_dir`]. Regions
    /// are the `locatedIn` objects that never occur as `locatedIn` subjects.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, CountriesError> {
        let dir = dir.as_ref();
        let path = |n: &str| dir.join(n);
        for n in ["train.txt", "valid.txt", "test.txt"] {
            if !path(n).is_file() {
                return Err(CountriesError::MissingDataset(path(n).display().to_string()));
            }
        }
        let train = read_tsv(&path("train.txt"))?;
        let valid = read_tsv(&path("valid.txt"))?;
        let test = read_tsv(&path("test.txt"))?;
        let located = |f: &&[String; 3]| f[1] == LOCATED_IN;
        let subjects: BTreeSet<&String> = train.iter().filter(located).map(|f| &f[0]).collect();
        let regions: BTreeSet<String> = train
            .iter()
            .chain(&valid)
            .chain(&test)
            .filter(located)
            .map(|f| &f[2])
            .filter(|o| !subjects.contains(o))
            .cloned()
            .collect();
        Ok(Self {
            train,
            valid,
            test,
            regions: regions.into_iter().collect(),
        })
    }

    pub fn knowledge_base(&self) -> Result<KnowledgeBase, CountriesError> {
        facts_kb(&self.train)
    }

    /// Non-held-out countries with a known region and at least one
    /// neighbor.
    pub fn training_countries(&self) -> Vec<String> {
        let held: BTreeSet<&String> = self.valid.iter().chain(&self.test).map(|f| &f[0]).collect();
        let regions: BTreeSet<&String> = self.regions.iter().collect();
        let bordered: BTreeSet<&String> = self.train.iter().filter(|f| f[1] == NEIGHBOR_OF).map(|f| &f[0]).collect();
        let set: BTreeSet<&String> = self
            .train
            .iter()
            .filter(|f| f[1] == LOCATED_IN && regions.contains(&f[2]))
            .map(|f| &f[0])
            .filter(|s| bordered.contains(s) && !held.contains(s))
            .collect();
        set.into_iter().cloned().collect()
    }

    /// The training graph as `task` would leave it were `country` held out,
    /// restricted to facts a rule of `task`'s length can reach from it.
    pub fn episode(&self, task: Task, country: &str) -> Vec<[String; 3]> {
        let held = BTreeSet::from([country]);
        let near = near(&self.train, &held);
        let regions: BTreeSet<&str> = self.regions.iter().map(String::as_str).collect();
        let kept: Vec<&[String; 3]> = self
            .train
            .iter()
            .filter(|f| !hidden(task, f, &held, &near, &regions))
            .collect();
        let mut reach: BTreeSet<&str> = held;
        let mut frontier: Vec<&str> = vec![country];
        for _ in 1..task.body_len() {
            let next: Vec<&str> = kept
                .iter()
                .filter(|f| frontier.contains(&f[0].as_str()))
                .map(|f| f[2].as_str())
                .filter(|o| reach.insert(o))
                .collect();
            frontier = next;
        }
        kept.into_iter().filter(|f| reach.contains(f[0].as_str())).cloned().collect()
    }

    /// Every `(country, region)` pair for the given countries with its
    /// truth label.
    fn candidates(&self, queries: &[[String; 3]]) -> Vec<(String, String, bool)> {
        let truth: BTreeSet<(&String, &String)> = queries.iter().map(|f| (&f[0], &f[2])).collect();
        let countries: BTreeSet<&String> = queries.iter().map(|f| &f[0]).collect();
        let mut out = Vec::new();
        for c in countries {
            for r in &self.regions {
                out.push((c.clone(), r.clone(), truth.contains(&(c, r))));
            }
        }
        out
    }
}

/// AUC-PR (×100) of a trained template over `queries × regions`. Pairs the
/// rule cannot derive score 0.
pub fn evaluate_auc(
    model: &TemplateModel,
    net: &GroundNetwork,
    split: &CountriesSplit,
    queries: &[[String; 3]],
) -> Result<f64, CountriesError> {
    let values = net.tape().forward(model.store().values(), &[]).map_err(GroundError::from)?;
    let scored: Vec<(f64, bool)> = split
        .candidates(queries)
        .into_iter()
        .map(|(c, r, label)| (values.value(net.node_or_zero(&[&c, &r])), label))
        .collect();
    Ok(auc_pr(&scored)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountriesConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub margin_loss: bool,
}

impl Default for CountriesConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                step_size: 0.03,
                margin: 0.5,
                batch_size: 8,
                epochs: 30,
                seed: 0,
                alpha: 0.95,
                patience: None,
            },
            margin_loss: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CountriesRun {
    pub model: TemplateModel,
    pub report: FitReport,
    pub valid_auc: f64,
    pub test_auc: f64,
}

/// Trains `template` on one episode per training country: the country's
/// facts are hidden as `task` hides a held-out country's, and the rule must
/// recover its region. Keeps the epoch with the best validation AUC-PR.
pub fn train_countries(
    split: &CountriesSplit,
    task: Task,
    template: Template,
    combiner: Arc<dyn LeafCombiner>,
    connective: Arc<dyn Connective>,
    cfg: &CountriesConfig,
) -> Result<CountriesRun, CountriesError> {
    cfg.train.validate()?;
    let kb = split.knowledge_base()?;
    let alpha = AlphaConfig::new(cfg.train.alpha).map_err(GroundError::from)?;
    let mut model = TemplateModel::new(template, combiner, connective, alpha, cfg.train.seed)?;
    let net = model.ground(&kb)?;
    let truth: BTreeSet<(&String, &String)> = split
        .train
        .iter()
        .filter(|f| f[1] == LOCATED_IN)
        .map(|f| (&f[0], &f[2]))
        .collect();
    let countries = split.training_countries();
    let mut tapes = Vec::with_capacity(countries.len());
    let mut examples = Vec::new();
    for c in &countries {
        let episode = model.ground(&facts_kb(&split.episode(task, c))?)?;
        for r in &split.regions {
            examples.push(Example {
                tape: tapes.len(),
                node: episode.node_or_zero(&[c, r]),
                target: if truth.contains(&(c, r)) { 1.0 } else { 0.0 },
            });
        }
        tapes.push(episode.tape().clone());
    }
    let loss = if cfg.margin_loss {
        Loss::Margin(cfg.train.margin)
    } else {
        Loss::Squared
    };
    let steps = countries.len().div_ceil(cfg.train.batch_size);
    let report = {
        let view = model.clone();
        let check = model.clone();
        let mut obj = TapeObjective::new(
            model.store_mut(),
            tapes,
            examples,
            loss,
            cfg.train.batch_size,
        )
        .with_steps_per_epoch(steps)
        .with_validator(|store| {
            let mut m = view.clone();
            *m.store_mut() = store.clone();
            evaluate_auc(&m, &net, split, &split.valid).map_err(|e| TrainError::InvalidConfig(e.to_string()))
        })
        .with_constraints(move |store| {
            let mut m = check.clone();
            *m.store_mut() = store.clone();
            Ok(m.max_constraint_violation()?)
        });
        fit(&mut obj, &cfg.train)?
    };
    let valid_auc = evaluate_auc(&model, &net, split, &split.valid)?;
    let test_auc = evaluate_auc(&model, &net, split, &split.test)?;
    Ok(CountriesRun {
        model,
        report,
        valid_auc,
        test_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI: &str = "# comment\n\
        AAA\tR1\tS1\tBBB\n\
        BBB\tR1\tS1\tAAA,CCC\n\
        CCC\tR2\tS2\tBBB\n\
        ZZZ\tAntarctic\t\t\n";

    #[test]
    fn parse_symmetrises_and_drops_unplaced() {
        let w = World::parse(MINI).unwrap();
        assert_eq!(w.countries().len(), 3);
        assert_eq!(w.country("CCC").unwrap().borders, vec!["BBB"]);
        assert_eq!(w.regions(), vec!["R1", "R2"]);
        // 3·2 locatedIn + 4 neighborOf + 2 subregion facts
        assert_eq!(w.facts().len(), 12);
    }

    #[test]
    fn bad_row_reports_line() {
        let err = World::parse("A\tB\n").unwrap_err();
        assert!(matches!(err, CountriesError::Parse { line: 1, .. }));
    }

    #[test]
    fn task_names_parse() {
        assert_eq!("s3".parse::<Task>().unwrap(), Task::S3);
        assert!("S4".parse::<Task>().is_err());
        assert!(Template::from_spec(Task::S3.template()).is_ok());
    }
}
