//! Grid navigation: one learned rule per move direction.
//!
//! Cells are `(x, y)` with `x` growing east and `y` growing south. Off-grid
//! neighbours count as obstacles.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounder::{GroundError, KnowledgeBase, NodeOp, NodeRule, Template, TemplateModel, TemplateSpec};
use crate::operators::{AlphaConfig, Connective, LeafCombiner, LnnPredCombiner};
use crate::train::{fit, Example, FitReport, Loss, TapeObjective, TrainConfig, TrainError};

pub type Cell = (usize, usize);

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{obstacles} obstacles and a target do not fit on a {size}x{size} grid")]
    TooManyObstacles { size: usize, obstacles: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("no training grids")]
    NoGrids,
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    North,
    South,
    East,
    West,
}

/// Evaluation tie-break order.
pub const DIRECTIONS: [Direction; 4] = [Direction::North, Direction::South, Direction::East, Direction::West];

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::North => "North",
            Direction::South => "South",
            Direction::East => "East",
            Direction::West => "West",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn action(self) -> String {
        format!("Go{}", self.name())
    }

    pub fn obstacle_predicate(self) -> String {
        format!("HasObstacle{}", self.name())
    }

    pub fn target_predicate(self) -> String {
        format!("HasTarget{}", self.name())
    }
}

/// Name of the complement of a base predicate.
pub fn negated(predicate: &str) -> String {
    format!("Not{predicate}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub size: usize,
    pub obstacles: BTreeSet<Cell>,
    pub target: Cell,
}

/// Obstacles uniformly without replacement, then the target uniformly among
/// the remaining cells.
pub fn generate_grid(size: usize, obstacles: usize, rng: &mut impl Rng) -> Result<Grid, GridError> {
    let cells = size * size;
    if obstacles + 1 > cells {
        return Err(GridError::TooManyObstacles { size, obstacles });
    }
    let picks = sample(rng, cells, obstacles + 1).into_vec();
    let at = |i: usize| (i % size, i / size);
    Ok(Grid {
        size,
        obstacles: picks[..obstacles].iter().map(|&i| at(i)).collect(),
        target: at(picks[obstacles]),
    })
}

/// `count` grids from one seeded stream.
pub fn generate_grids(count: usize, size: usize, obstacles: usize, seed: u64) -> Result<Vec<Grid>, GridError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_grid(size, obstacles, &mut rng)).collect()
}

impl Grid {
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.size).flat_map(move |y| (0..self.size).map(move |x| (x, y)))
    }

    /// Cells an agent can stand on: neither obstacle nor target.
    pub fn agent_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.cells().filter(|c| *c != self.target && !self.obstacles.contains(c))
    }

    /// The neighbour in `d`, or `None` off-grid.
    pub fn step(&self, (x, y): Cell, d: Direction) -> Option<Cell> {
        let (x, y) = match d {
            Direction::North => (Some(x), y.checked_sub(1)),
            Direction::South => (Some(x), Some(y + 1).filter(|&v| v < self.size)),
            Direction::East => (Some(x + 1).filter(|&v| v < self.size), Some(y)),
            Direction::West => (x.checked_sub(1), Some(y)),
        };
        Some((x?, y?))
    }

    pub fn blocked(&self, cell: Cell, d: Direction) -> bool {
        self.step(cell, d).is_none_or(|n| self.obstacles.contains(&n))
    }

    /// −2 into an obstacle or off-grid, +1 toward the target, −1 otherwise.
    pub fn reward(&self, cell: Cell, d: Direction) -> i32 {
        match self.step(cell, d) {
            Some(n) if !self.obstacles.contains(&n) => {
                if manhattan(n, self.target) < manhattan(cell, self.target) {
                    1
                } else {
                    -1
                }
            }
            _ => -2,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

fn io_err(path: &Path, e: impl ToString) -> GridError {
    GridError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), GridError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// The 8 base predicates of one cell, indexed by [`Direction::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CellPredicates {
    pub obstacle: [bool; 4],
    pub target: [bool; 4],
}

/// Base predicates for every cell. A target flag is set when the target
/// lies strictly beyond the cell along that direction's axis.
pub fn extract_predicates(grid: &Grid) -> BTreeMap<Cell, CellPredicates> {
    let (tx, ty) = grid.target;
    grid.cells()
        .map(|c @ (x, y)| {
            let mut p = CellPredicates::default();
            for d in DIRECTIONS {
                p.obstacle[d.index()] = grid.blocked(c, d);
                p.target[d.index()] = match d {
                    Direction::North => ty < y,
                    Direction::South => ty > y,
                    Direction::East => tx > x,
                    Direction::West => tx < x,
                };
            }
            (c, p)
        })
        .collect()
}

/// `(cell, direction, 1 iff the move earns +1)` for every agent cell.
pub fn derive_labels(grid: &Grid) -> Vec<(Cell, Direction, f64)> {
    grid.agent_cells()
        .flat_map(|c| DIRECTIONS.map(|d| (c, d, if grid.reward(c, d) == 1 { 1.0 } else { 0.0 })))
        .collect()
}

fn x_name(x: usize) -> String {
    format!("x{x}")
}

fn y_name(y: usize) -> String {
    format!("y{y}")
}

fn obstacle_domain() -> Vec<String> {
    DIRECTIONS
        .iter()
        .flat_map(|d| [d.obstacle_predicate(), negated(&d.obstacle_predicate())])
        .collect()
}

fn target_domain() -> Vec<String> {
    DIRECTIONS
        .iter()
        .flat_map(|d| [d.target_predicate(), negated(&d.target_predicate())])
        .collect()
}

/// Cell facts over constants `x{i}`, `y{j}`, negations materialized.
pub fn knowledge_base(grid: &Grid) -> Result<KnowledgeBase, GridError> {
    let mut kb = KnowledgeBase::new();
    for p in obstacle_domain().iter().chain(&target_domain()) {
        kb.declare(p, 2)?;
    }
    for (c, preds) in extract_predicates(grid) {
        let (x, y) = (x_name(c.0), y_name(c.1));
        for d in DIRECTIONS {
            for (name, on) in [
                (d.obstacle_predicate(), preds.obstacle[d.index()]),
                (d.target_predicate(), preds.target[d.index()]),
            ] {
                let fact = if on { name } else { negated(&name) };
                kb.add_fact(&fact, &[&x, &y])?;
            }
        }
    }
    Ok(kb)
}

/// `Go{d}(X,Y) ← P(X,Y) ∧ Q(X,Y)` with `P` over obstacle literals and `Q`
/// over target literals.
pub fn action_template(d: Direction) -> TemplateSpec {
    let mut p = TemplateSpec::leaf("P", &["X", "Y"], &[]);
    p.domain = obstacle_domain();
    let mut q = TemplateSpec::leaf("Q", &["X", "Y"], &[]);
    q.domain = target_domain();
    TemplateSpec::internal(&d.action(), &["X", "Y"], NodeOp::And, vec![p, q])
}

/// Per-cell action scores, indexed by [`Direction::index`].
pub trait Policy {
    fn scores(&self, grid: &Grid) -> Result<BTreeMap<Cell, [f64; 4]>, GridError>;
}

impl<F: Fn(&Grid, Cell) -> [f64; 4]> Policy for F {
    fn scores(&self, grid: &Grid) -> Result<BTreeMap<Cell, [f64; 4]>, GridError> {
        Ok(grid.agent_cells().map(|c| (c, self(grid, c))).collect())
    }
}

/// Greedy action, first of [`DIRECTIONS`] on ties.
pub fn greedy(scores: &[f64; 4]) -> Direction {
    let mut best = 0;
    for i in 1..4 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    DIRECTIONS[best]
}

/// Mean reward of the greedy action over every agent cell of every grid.
pub fn evaluate_policy(policy: &dyn Policy, grids: &[Grid]) -> Result<f64, GridError> {
    let mut total = 0i64;
    let mut n = 0usize;
    for g in grids {
        let scores = policy.scores(g)?;
        for c in g.agent_cells() {
            let s = scores.get(&c).copied().unwrap_or([0.0; 4]);
            total += g.reward(c, greedy(&s)) as i64;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total as f64 / n as f64 })
}

/// Best achievable mean reward: each cell takes its best move.
pub fn optimal_reward(grids: &[Grid]) -> f64 {
    let rewards: Vec<i32> = grids
        .iter()
        .flat_map(|g| g.agent_cells().map(move |c| DIRECTIONS.map(|d| g.reward(c, d)).into_iter().max().unwrap_or(0)))
        .collect();
    rewards.iter().sum::<i32>() as f64 / rewards.len().max(1) as f64
}

/// One trained template per direction, in [`DIRECTIONS`] order.
#[derive(Debug, Clone)]
pub struct GridRules {
    pub models: Vec<TemplateModel>,
}

impl GridRules {
    pub fn model(&self, d: Direction) -> &TemplateModel {
        &self.models[d.index()]
    }

    pub fn rules(&self, d: Direction) -> Result<Vec<NodeRule>, GridError> {
        Ok(self.model(d).rules()?)
    }
}

impl Policy for GridRules {
    fn scores(&self, grid: &Grid) -> Result<BTreeMap<Cell, [f64; 4]>, GridError> {
        let kb = knowledge_base(grid)?;
        let mut out: BTreeMap<Cell, [f64; 4]> = grid.agent_cells().map(|c| (c, [0.0; 4])).collect();
        for (i, model) in self.models.iter().enumerate() {
            let net = model.ground(&kb)?;
            let eval = net.tape().forward(model.store().values(), &[]).map_err(GroundError::from)?;
            for (c, s) in out.iter_mut() {
                s[i] = eval.value(net.node_or_zero(&[&x_name(c.0), &y_name(c.1)]));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub size: usize,
    pub train_obstacles: usize,
    pub test_obstacles: usize,
    pub margin_loss: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                step_size: 0.03,
                margin: 0.5,
                batch_size: 64,
                epochs: 100,
                seed: 0,
                alpha: 0.8,
                patience: None,
            },
            size: 5,
            train_obstacles: 3,
            test_obstacles: 12,
            margin_loss: false,
        }
    }
}

/// LNN-pred leaves sized for four true literals per cell: their summed
/// initial weight stays below `β`, off the clamp.
pub fn grid_combiner() -> Arc<dyn LeafCombiner> {
    Arc::new(LnnPredCombiner {
        weight_init: 0.2,
        ..LnnPredCombiner::default()
    })
}

/// Fits each direction's rule to its reward-derived labels with squared
/// loss.
pub fn train_rules(
    grids: &[Grid],
    combiner: Arc<dyn LeafCombiner>,
    connective: Arc<dyn Connective>,
    cfg: &GridConfig,
) -> Result<(GridRules, Vec<FitReport>), GridError> {
    if grids.is_empty() {
        return Err(GridError::NoGrids);
    }
    cfg.train.validate()?;
    let alpha = AlphaConfig::new(cfg.train.alpha).map_err(GroundError::from)?;
    let kbs = grids.iter().map(knowledge_base).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<_> = grids.iter().map(derive_labels).collect();
    let mut models = Vec::with_capacity(4);
    let mut reports = Vec::with_capacity(4);
    for d in DIRECTIONS {
        let template = Template::from_spec(action_template(d))?;
        let seed = cfg.train.seed.wrapping_add(d.index() as u64);
        let mut model = TemplateModel::new(template, combiner.clone(), connective.clone(), alpha, seed)?;
        let mut tapes = Vec::with_capacity(grids.len());
        let mut examples = Vec::new();
        for (kb, labels) in kbs.iter().zip(&labels) {
            let net = model.ground(kb)?;
            for &(c, _, target) in labels.iter().filter(|l| l.1 == d) {
                examples.push(Example {
                    tape: tapes.len(),
                    node: net.node_or_zero(&[&x_name(c.0), &y_name(c.1)]),
                    target,
                });
            }
            tapes.push(net.tape().clone());
        }
        let check = model.clone();
        let mut train = cfg.train.clone();
        train.seed = seed;
        let report = {
            let loss = if cfg.margin_loss {
                Loss::Margin(cfg.train.margin)
            } else {
                Loss::Squared
            };
            let mut obj = TapeObjective::new(model.store_mut(), tapes, examples, loss, cfg.train.batch_size)
                .with_constraints(move |store| {
                    let mut m = check.clone();
                    *m.store_mut() = store.clone();
                    Ok(m.max_constraint_violation()?)
                });
            fit(&mut obj, &train)?
        };
        reports.push(report);
        models.push(model);
    }
    Ok((GridRules { models }, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub grids_seen: usize,
    pub mean_reward: f64,
}

/// Test reward after training on the first `n` grids, for each `n`.
pub fn reward_curve(
    train: &[Grid],
    test: &[Grid],
    sizes: &[usize],
    combiner: Arc<dyn LeafCombiner>,
    connective: Arc<dyn Connective>,
    cfg: &GridConfig,
) -> Result<Vec<CurvePoint>, GridError> {
    sizes
        .iter()
        .map(|&n| {
            let (rules, _) = train_rules(&train[..n.min(train.len())], combiner.clone(), connective.clone(), cfg)?;
            Ok(CurvePoint {
                grids_seen: n,
                mean_reward: evaluate_policy(&rules, test)?,
            })
        })
        .collect()
}

pub fn write_curve_csv(points: &[CurvePoint], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "grids_seen,mean_test_reward")?;
    for p in points {
        writeln!(w, "{},{}", p.grids_seen, p.mean_reward)?;
    }
    Ok(())
}
