//! H- to V-representation conversion for operator constraint systems and
//! the folding layer that maps free parameters onto feasible `(β, w)`.
//!
//! Vectors are laid out as `z = (β, w₁, …, wₙ)`.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operators::{AlphaConfig, OperatorParams};
use crate::tape::{NodeId, TapeBuilder};

const FEAS_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-8;
const PIVOT_TOL: f64 = 1e-11;
const MAX_DIM: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("arity must be at least 1")]
    ZeroArity,
    #[error("constraint system is infeasible")]
    Infeasible,
    #[error("polyhedron contains a line (not pointed)")]
    NotPointed,
    #[error("dimension {0} exceeds the supported maximum of 16")]
    TooLarge(usize),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("malformed system: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectiveKind {
    And,
    Or,
}

/// `{z : A z ≤ b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HPolyhedron {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl HPolyhedron {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self, PolytopeError> {
        if a.len() != b.len() {
            return Err(PolytopeError::Malformed(format!("{} rows but {} constants", a.len(), b.len())));
        }
        let d = a.first().map_or(0, Vec::len);
        if d == 0 || a.iter().any(|r| r.len() != d) {
            return Err(PolytopeError::Malformed("ragged or empty coefficient matrix".into()));
        }
        Ok(Self { a, b })
    }

    /// The conjunction system without the feasibility check. Rows: `−wᵢ ≤ 0`,
    /// then `β − αwᵢ ≤ 1−α`, then `−β + (1−α)Σw ≤ −α`.
    pub fn lnn_system(arity: usize, alpha: f64) -> Self {
        let d = arity + 1;
        let mut a = Vec::with_capacity(2 * arity + 1);
        let mut b = Vec::with_capacity(2 * arity + 1);
        for i in 0..arity {
            let mut row = vec![0.0; d];
            row[1 + i] = -1.0;
            a.push(row);
            b.push(0.0);
        }
        for i in 0..arity {
            let mut row = vec![0.0; d];
            row[0] = 1.0;
            row[1 + i] = -alpha;
            a.push(row);
            b.push(1.0 - alpha);
        }
        let mut row = vec![1.0 - alpha; d];
        row[0] = -1.0;
        a.push(row);
        b.push(-alpha);
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    pub fn rows(&self) -> usize {
        self.a.len()
    }

    /// `max_i (A z − b)_i`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, bi)| dot(row, z) - bi)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.max_violation(z) <= tol
    }

    /// Rows active at `z` within `tol`.
    pub fn active_rows(&self, z: &[f64], tol: f64) -> Vec<usize> {
        (0..self.rows())
            .filter(|&i| (dot(&self.a[i], z) - self.b[i]).abs() <= tol)
            .collect()
    }
}

/// Symmetric feasible point of the `arity`-ary system, if one exists. The
/// system is feasible exactly when `α > n/(n+1)`.
pub fn symmetric_witness(arity: usize, alpha: f64) -> Option<Vec<f64>> {
    let n = arity as f64;
    let denom = alpha - n * (1.0 - alpha);
    if denom <= 0.0 {
        return None;
    }
    let w = (2.0 * alpha - 1.0) / denom;
    let beta = 1.0 - alpha + alpha * w;
    let mut z = vec![w; arity + 1];
    z[0] = beta;
    Some(z)
}

/// Constraint system of an `arity`-ary conjunction or disjunction (both share
/// the same system). Fails when no feasible operator exists at this `alpha`.
pub fn build_constraints(
    arity: usize,
    alpha: AlphaConfig,
    _kind: ConnectiveKind,
) -> Result<HPolyhedron, PolytopeError> {
    if arity == 0 {
        return Err(PolytopeError::ZeroArity);
    }
    if arity + 1 > MAX_DIM {
        return Err(PolytopeError::TooLarge(arity + 1));
    }
    let poly = HPolyhedron::lnn_system(arity, alpha.value());
    match symmetric_witness(arity, alpha.value()) {
        Some(z) if poly.contains(&z, FEAS_TOL) => Ok(poly),
        _ => Err(PolytopeError::Infeasible),
    }
}

/// Generators: `P = conv(vertices) + cone(rays)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VRepresentation {
    pub vertices: Vec<Vec<f64>>,
    pub rays: Vec<Vec<f64>>,
}

impl VRepresentation {
    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    /// Checks the membership invariants against `poly`.
    pub fn satisfies(&self, poly: &HPolyhedron) -> bool {
        self.vertices.iter().all(|v| poly.contains(v, FEAS_TOL))
            && self
                .rays
                .iter()
                .all(|d| poly.a.iter().all(|row| dot(row, d) <= FEAS_TOL))
    }
}

/// An H→V conversion strategy.
pub trait VertexEnumerator: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn enumerate(&self, poly: &HPolyhedron) -> Result<VRepresentation, PolytopeError>;
}

/// Solves every square subsystem of active rows; rays come from rank-`d−1`
/// subsystems of the recession cone.
#[derive(Debug, Clone, Copy, Default)]
pub struct ActiveSetEnumeration;

/// Incremental double description on the homogenized cone
/// `{(z, t) : A z − b t ≤ 0, t ≥ 0}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleDescription;

pub fn h_to_v(poly: &HPolyhedron) -> Result<VRepresentation, PolytopeError> {
    ActiveSetEnumeration.enumerate(poly)
}

fn precheck(poly: &HPolyhedron) -> Result<usize, PolytopeError> {
    let d = poly.dim();
    if d > MAX_DIM {
        return Err(PolytopeError::TooLarge(d));
    }
    if rank(&poly.a) < d {
        return Err(PolytopeError::NotPointed);
    }
    Ok(d)
}

impl VertexEnumerator for ActiveSetEnumeration {
    fn name(&self) -> &'static str {
        "active-set"
    }

    fn enumerate(&self, poly: &HPolyhedron) -> Result<VRepresentation, PolytopeError> {
        let d = precheck(poly)?;
        let m = poly.rows();
        let mut vertices = Vec::new();
        for subset in Combinations::new(m, d) {
            let a: Vec<Vec<f64>> = subset.iter().map(|&i| poly.a[i].clone()).collect();
            let b: Vec<f64> = subset.iter().map(|&i| poly.b[i]).collect();
            if let Some(z) = solve(a, b) {
                if poly.contains(&z, FEAS_TOL) {
                    push_unique(&mut vertices, z);
                }
            }
        }
        if vertices.is_empty() {
            return Err(PolytopeError::Infeasible);
        }
        let mut rays = Vec::new();
        if d == 1 {
            for dir in [vec![1.0], vec![-1.0]] {
                if poly.a.iter().all(|row| dot(row, &dir) <= FEAS_TOL) {
                    push_unique(&mut rays, dir);
                }
            }
        } else {
            for subset in Combinations::new(m, d - 1) {
                let a: Vec<Vec<f64>> = subset.iter().map(|&i| poly.a[i].clone()).collect();
                let Some(v) = null_vector(a) else { continue };
                for sign in [1.0, -1.0] {
                    let dir: Vec<f64> = v.iter().map(|x| sign * x).collect();
                    if poly.a.iter().all(|row| dot(row, &dir) <= FEAS_TOL) {
                        push_unique(&mut rays, dir);
                    }
                }
            }
        }
        Ok(canonical(vertices, rays))
    }
}

#[derive(Clone)]
struct Generator {
    x: Vec<f64>,
    zeros: u128,
}

impl VertexEnumerator for DoubleDescription {
    fn name(&self) -> &'static str {
        "double-description"
    }

    fn enumerate(&self, poly: &HPolyhedron) -> Result<VRepresentation, PolytopeError> {
        let d = precheck(poly)?;
        let dd = d + 1;
        let mut rows: Vec<Vec<f64>> = poly
            .a
            .iter()
            .zip(&poly.b)
            .map(|(row, &bi)| {
                let mut h = row.clone();
                h.push(-bi);
                h
            })
            .collect();
        let mut t_row = vec![0.0; dd];
        t_row[d] = -1.0;
        rows.push(t_row);
        if rows.len() > 128 {
            return Err(PolytopeError::TooLarge(rows.len()));
        }

        let basis = independent_rows(&rows, dd);
        if basis.len() < dd {
            return Err(PolytopeError::NotPointed);
        }
        // Columns of −H_B⁻¹ generate {x : H_B x ≤ 0}.
        let hb: Vec<Vec<f64>> = basis.iter().map(|&i| rows[i].clone()).collect();
        let mut gens = Vec::with_capacity(dd);
        for j in 0..dd {
            let mut e = vec![0.0; dd];
            e[j] = -1.0;
            let x = solve(hb.clone(), e).ok_or(PolytopeError::NotPointed)?;
            let zeros = basis
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != j)
                .fold(0u128, |acc, (_, &i)| acc | (1u128 << i));
            gens.push(Generator { x: normalize(x), zeros });
        }

        for (i, h) in rows.iter().enumerate() {
            if basis.contains(&i) {
                continue;
            }
            let s: Vec<f64> = gens.iter().map(|g| dot(h, &g.x)).collect();
            let tol = FEAS_TOL * norm(h).max(1.0);
            let pos: Vec<usize> = (0..gens.len()).filter(|&k| s[k] > tol).collect();
            if pos.is_empty() {
                for (k, g) in gens.iter_mut().enumerate() {
                    if s[k].abs() <= tol {
                        g.zeros |= 1u128 << i;
                    }
                }
                continue;
            }
            let neg: Vec<usize> = (0..gens.len()).filter(|&k| s[k] < -tol).collect();
            let mut next = Vec::with_capacity(gens.len());
            for &p in &pos {
                for &n in &neg {
                    let common = gens[p].zeros & gens[n].zeros;
                    if (common.count_ones() as usize) < dd - 2 {
                        continue;
                    }
                    let adjacent = gens
                        .iter()
                        .enumerate()
                        .all(|(k, g)| k == p || k == n || g.zeros & common != common);
                    if !adjacent {
                        continue;
                    }
                    let x: Vec<f64> = gens[n]
                        .x
                        .iter()
                        .zip(&gens[p].x)
                        .map(|(xn, xp)| s[p] * xn - s[n] * xp)
                        .collect();
                    next.push(Generator {
                        x: normalize(x),
                        zeros: common | (1u128 << i),
                    });
                }
            }
            for (k, g) in gens.iter().enumerate() {
                if s[k] <= tol {
                    let mut g = g.clone();
                    if s[k] >= -tol {
                        g.zeros |= 1u128 << i;
                    }
                    next.push(g);
                }
            }
            gens = next;
        }

        let mut vertices = Vec::new();
        let mut rays = Vec::new();
        for g in gens {
            let t = g.x[d];
            let z = &g.x[..d];
            if t > FEAS_TOL {
                push_unique(&mut vertices, z.iter().map(|v| v / t).collect());
            } else if norm(z) > FEAS_TOL {
                push_unique(&mut rays, z.to_vec());
            }
        }
        if vertices.is_empty() {
            return Err(PolytopeError::Infeasible);
        }
        Ok(canonical(vertices, rays))
    }
}

/// Unit-normalizes rays, drops near-duplicates and sorts both lists.
fn canonical(vertices: Vec<Vec<f64>>, rays: Vec<Vec<f64>>) -> VRepresentation {
    let mut unit_rays: Vec<Vec<f64>> = Vec::new();
    for r in rays {
        push_unique(&mut unit_rays, unit(r));
    }
    let mut vertices = vertices;
    vertices.sort_by(|x, y| lex_cmp(x, y));
    unit_rays.sort_by(|x, y| lex_cmp(x, y));
    VRepresentation {
        vertices,
        rays: unit_rays,
    }
}

fn lex_cmp(x: &[f64], y: &[f64]) -> std::cmp::Ordering {
    for (a, b) in x.iter().zip(y) {
        match a.total_cmp(b) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

fn push_unique(list: &mut Vec<Vec<f64>>, v: Vec<f64>) {
    if !list
        .iter()
        .any(|u| u.iter().zip(&v).all(|(a, b)| (a - b).abs() <= DEDUP_TOL))
    {
        list.push(v);
    }
}

/// Certificate that `v` is a vertex of `poly`: feasible with `d` independent
/// active rows.
pub fn is_extreme_vertex(poly: &HPolyhedron, v: &[f64]) -> bool {
    if !poly.contains(v, FEAS_TOL) {
        return false;
    }
    let active: Vec<Vec<f64>> = poly.active_rows(v, 1e-7).into_iter().map(|i| poly.a[i].clone()).collect();
    rank(&active) == poly.dim()
}

/// Certificate that `r` is an extreme ray of the recession cone: `A r ≤ 0`
/// with `d − 1` independent rows tight.
pub fn is_extreme_ray(poly: &HPolyhedron, r: &[f64]) -> bool {
    if poly.a.iter().any(|row| dot(row, r) > FEAS_TOL) || norm(r) <= FEAS_TOL {
        return false;
    }
    let tight: Vec<Vec<f64>> = poly
        .a
        .iter()
        .filter(|row| dot(row, r).abs() <= 1e-7)
        .cloned()
        .collect();
    rank(&tight) == poly.dim() - 1
}

// ---------------------------------------------------------------------------
// folding

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedParams {
    pub mu_hat: Vec<f64>,
    pub lambda_hat: Vec<f64>,
}

/// Normal initialization of the free folding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub mu_mean: f64,
    pub mu_std: f64,
    pub lambda_mean: f64,
    pub lambda_std: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self {
            mu_mean: 0.05,
            mu_std: 0.01,
            lambda_mean: 0.0,
            lambda_std: 0.1,
        }
    }
}

pub fn init_folded(vrep: &VRepresentation, seed: u64) -> FoldedParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_folded_with(vrep, &InitScheme::default(), &mut rng)
}

pub fn init_folded_with(vrep: &VRepresentation, scheme: &InitScheme, rng: &mut dyn RngCore) -> FoldedParams {
    let mu = Normal::new(scheme.mu_mean, scheme.mu_std).expect("finite init std");
    let lambda = Normal::new(scheme.lambda_mean, scheme.lambda_std).expect("finite init std");
    FoldedParams {
        mu_hat: (0..vrep.rays.len()).map(|_| mu.sample(rng)).collect(),
        lambda_hat: (0..vrep.vertices.len()).map(|_| lambda.sample(rng)).collect(),
    }
}

fn check_fold_dims(mu: usize, lambda: usize, vrep: &VRepresentation) -> Result<(), PolytopeError> {
    if mu != vrep.rays.len() {
        return Err(PolytopeError::DimensionMismatch {
            expected: vrep.rays.len(),
            got: mu,
        });
    }
    if lambda != vrep.vertices.len() {
        return Err(PolytopeError::DimensionMismatch {
            expected: vrep.vertices.len(),
            got: lambda,
        });
    }
    Ok(())
}

/// `z = Υ·relu(μ̂) + Γ·softmax(λ̂)`.
pub fn fold(params: &FoldedParams, vrep: &VRepresentation) -> Result<OperatorParams, PolytopeError> {
    check_fold_dims(params.mu_hat.len(), params.lambda_hat.len(), vrep)?;
    let lambda = crate::operators::softmax(&params.lambda_hat);
    let mut z = vec![0.0; vrep.dim()];
    for (v, l) in vrep.vertices.iter().zip(&lambda) {
        for (zi, vi) in z.iter_mut().zip(v) {
            *zi += l * vi;
        }
    }
    for (r, m) in vrep.rays.iter().zip(&params.mu_hat) {
        let m = m.max(0.0);
        for (zi, ri) in z.iter_mut().zip(r) {
            *zi += m * ri;
        }
    }
    Ok(OperatorParams::new(z[0], z[1..].to_vec()))
}

/// Tape form of [`fold`]; returns nodes for `(β, w₁, …, wₙ)`.
pub fn fold_node(
    b: &mut TapeBuilder,
    vrep: &VRepresentation,
    mu_hat: &[NodeId],
    lambda_hat: &[NodeId],
) -> Result<Vec<NodeId>, PolytopeError> {
    check_fold_dims(mu_hat.len(), lambda_hat.len(), vrep)?;
    let mu: Vec<NodeId> = mu_hat.iter().map(|&m| b.relu(m)).collect();
    let lambda = b.softmax(lambda_hat);
    Ok((0..vrep.dim())
        .map(|j| {
            let mut terms = Vec::new();
            for (v, &l) in vrep.vertices.iter().zip(&lambda) {
                if v[j] != 0.0 {
                    terms.push((l, v[j]));
                }
            }
            for (r, &m) in vrep.rays.iter().zip(&mu) {
                if r[j] != 0.0 {
                    terms.push((m, r[j]));
                }
            }
            b.linear(terms, 0.0)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// cache

type CacheKey = (usize, u64, ConnectiveKind, &'static str);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<VRepresentation>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<VRepresentation>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Shared V-representation of the `arity`-ary system. The first completed
/// computation for a key wins; later callers share it.
pub fn cached_vrep(
    arity: usize,
    alpha: AlphaConfig,
    enumerator: &dyn VertexEnumerator,
) -> Result<Arc<VRepresentation>, PolytopeError> {
    cached_vrep_for(arity, alpha, ConnectiveKind::And, enumerator)
}

pub fn cached_vrep_for(
    arity: usize,
    alpha: AlphaConfig,
    kind: ConnectiveKind,
    enumerator: &dyn VertexEnumerator,
) -> Result<Arc<VRepresentation>, PolytopeError> {
    let key = (arity, alpha.value().to_bits(), kind, enumerator.name());
    if let Some(hit) = cache().lock().expect("cache poisoned").get(&key) {
        return Ok(hit.clone());
    }
    let poly = build_constraints(arity, alpha, kind)?;
    let vrep = Arc::new(enumerator.enumerate(&poly)?);
    let mut guard = cache().lock().expect("cache poisoned");
    Ok(guard.entry(key).or_insert(vrep).clone())
}

// ---------------------------------------------------------------------------
// small dense linear algebra

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    if m == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / m).collect()
    }
}

/// Row-reduces `m` in place and returns the pivot columns.
fn row_reduce(m: &mut [Vec<f64>]) -> Vec<usize> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let (best, val) = (r..rows)
            .map(|i| (i, m[i][c].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= PIVOT_TOL {
            continue;
        }
        m.swap(r, best);
        let p = m[r][c];
        for x in m[r].iter_mut() {
            *x /= p;
        }
        for i in 0..rows {
            if i != r && m[i][c] != 0.0 {
                let f = m[i][c];
                let (src, dst) = if i < r {
                    let (lo, hi) = m.split_at_mut(r);
                    (&hi[0], &mut lo[i])
                } else {
                    let (lo, hi) = m.split_at_mut(i);
                    (&lo[r], &mut hi[0])
                };
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d -= f * s;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    pivots
}

fn rank(m: &[Vec<f64>]) -> usize {
    let mut m = m.to_vec();
    row_reduce(&mut m).len()
}

/// Solves a square system; `None` when singular.
fn solve(a: Vec<Vec<f64>>, b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .into_iter()
        .zip(b)
        .map(|(mut row, bi)| {
            row.push(bi);
            row
        })
        .collect();
    let pivots = row_reduce(&mut aug);
    if pivots.len() != n || pivots.iter().any(|&c| c >= n) {
        return None;
    }
    Some(aug.iter().map(|row| row[n]).collect())
}

/// Basis vector of a one-dimensional null space; `None` otherwise.
fn null_vector(a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let cols = a[0].len();
    let mut m = a;
    let pivots = row_reduce(&mut m);
    if pivots.len() != cols - 1 {
        return None;
    }
    let free = (0..cols).find(|c| !pivots.contains(c))?;
    let mut v = vec![0.0; cols];
    v[free] = 1.0;
    for (r, &c) in pivots.iter().enumerate() {
        v[c] = -m[r][free];
    }
    Some(v)
}

/// Greedy selection of up to `want` linearly independent rows.
fn independent_rows(rows: &[Vec<f64>], want: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        basis.push(row.clone());
        if rank(&basis) == basis.len() {
            chosen.push(i);
            if chosen.len() == want {
                break;
            }
        } else {
            basis.pop();
        }
    }
    chosen
}

/// Lexicographic k-subsets of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            idx: (0..k).collect(),
            done: k > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn alpha(a: f64) -> AlphaConfig {
        AlphaConfig::new(a).unwrap()
    }

    fn has(list: &[Vec<f64>], v: &[f64], tol: f64) -> bool {
        list.iter().any(|u| u.iter().zip(v).all(|(a, b)| (a - b).abs() <= tol))
    }

    #[test]
    fn binary_rows_in_order() {
        let p = build_constraints(2, alpha(0.8), ConnectiveKind::And).unwrap();
        let expect_a = [
            [0.0, -1.0, 0.0],
            [0.0, 0.0, -1.0],
            [1.0, -0.8, 0.0],
            [1.0, 0.0, -0.8],
            [-1.0, 0.2, 0.2],
        ];
        for (row, want) in p.a.iter().zip(expect_a) {
            for (x, y) in row.iter().zip(want) {
                assert_relative_eq!(*x, y, epsilon = 1e-15);
            }
        }
        let expect_b = [0.0, 0.0, 0.2, 0.2, -0.8];
        for (x, y) in p.b.iter().zip(expect_b) {
            assert_relative_eq!(*x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn unary_alpha_one_rows() {
        let p = build_constraints(1, alpha(1.0), ConnectiveKind::Or).unwrap();
        assert_eq!(p.a, vec![vec![0.0, -1.0], vec![1.0, -1.0], vec![-1.0, 0.0]]);
        assert_eq!(p.b, vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn witness_is_tight_on_last_rows() {
        let p = HPolyhedron::lnn_system(2, 0.8);
        let z = symmetric_witness(2, 0.8).unwrap();
        assert_relative_eq!(z[0], 1.4, epsilon = 1e-12);
        assert_relative_eq!(z[1], 1.5, epsilon = 1e-12);
        assert_eq!(p.active_rows(&z, 1e-12), vec![2, 3, 4]);
    }

    #[test]
    fn small_alpha_high_arity_is_infeasible() {
        assert_eq!(
            build_constraints(3, alpha(0.7), ConnectiveKind::And),
            Err(PolytopeError::Infeasible)
        );
        let poly = HPolyhedron::lnn_system(3, 0.7);
        assert_eq!(ActiveSetEnumeration.enumerate(&poly), Err(PolytopeError::Infeasible));
        assert_eq!(DoubleDescription.enumerate(&poly), Err(PolytopeError::Infeasible));
    }

    #[test]
    fn binary_vertex_and_ray() {
        let p = build_constraints(2, alpha(0.8), ConnectiveKind::And).unwrap();
        for e in [&ActiveSetEnumeration as &dyn VertexEnumerator, &DoubleDescription] {
            let v = e.enumerate(&p).unwrap();
            assert!(has(&v.vertices, &[1.4, 1.5, 1.5], 1e-9), "{}", e.name());
            assert!(has(&v.rays, &unit(vec![0.8, 1.0, 1.0]), 1e-9), "{}", e.name());
            assert!(has(&v.rays, &unit(vec![0.8, 1.0, 3.0]), 1e-9), "{}", e.name());
            assert_eq!(v.rays.len(), 3);
            // (2(1−α), 1, 1) is a recession direction but the sum of two extreme rays
            assert!(p.a.iter().all(|row| dot(row, &[0.4, 1.0, 1.0]) <= 1e-12));
            assert!(!is_extreme_ray(&p, &[0.4, 1.0, 1.0]));
            assert!(v.satisfies(&p));
        }
    }

    #[test]
    fn unary_alpha_one_vertex() {
        let p = build_constraints(1, alpha(1.0), ConnectiveKind::And).unwrap();
        let v = h_to_v(&p).unwrap();
        assert!(has(&v.vertices, &[1.0, 1.0], 1e-12));
    }

    #[test]
    fn non_pointed_and_empty() {
        let line = HPolyhedron::new(vec![vec![1.0, 0.0]], vec![1.0]).unwrap();
        assert_eq!(h_to_v(&line), Err(PolytopeError::NotPointed));
        assert_eq!(DoubleDescription.enumerate(&line), Err(PolytopeError::NotPointed));
        let empty = HPolyhedron::new(vec![vec![1.0], vec![-1.0]], vec![0.0, -1.0]).unwrap();
        assert_eq!(h_to_v(&empty), Err(PolytopeError::Infeasible));
        assert_eq!(DoubleDescription.enumerate(&empty), Err(PolytopeError::Infeasible));
    }

    #[test]
    fn square_has_four_vertices_no_rays() {
        let p = HPolyhedron::new(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]],
            vec![1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        for e in [&ActiveSetEnumeration as &dyn VertexEnumerator, &DoubleDescription] {
            let v = e.enumerate(&p).unwrap();
            assert_eq!(v.vertices.len(), 4);
            assert!(v.rays.is_empty());
        }
    }

    #[test]
    fn fold_saturated_and_centroid() {
        let vrep = VRepresentation {
            vertices: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]],
            rays: vec![vec![1.0, 0.0]],
        };
        let one_hot = FoldedParams {
            mu_hat: vec![-10.0],
            lambda_hat: vec![0.0, 50.0, 0.0],
        };
        let z = fold(&one_hot, &vrep).unwrap();
        assert_relative_eq!(z.beta, 2.0, epsilon = 1e-9);
        assert_relative_eq!(z.weights[0], 0.0, epsilon = 1e-9);
        let uniform = FoldedParams {
            mu_hat: vec![-10.0],
            lambda_hat: vec![0.0; 3],
        };
        let z = fold(&uniform, &vrep).unwrap();
        assert_relative_eq!(z.beta, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(z.weights[0], 2.0 / 3.0, epsilon = 1e-12);
        assert!(fold(&FoldedParams { mu_hat: vec![], lambda_hat: vec![0.0; 3] }, &vrep).is_err());
    }

    #[test]
    fn fold_node_matches_fold() {
        let p = build_constraints(2, alpha(0.8), ConnectiveKind::And).unwrap();
        let vrep = h_to_v(&p).unwrap();
        let params = FoldedParams {
            mu_hat: (0..vrep.rays.len()).map(|i| 0.3 * i as f64 - 0.2).collect(),
            lambda_hat: (0..vrep.vertices.len()).map(|i| 0.1 * i as f64).collect(),
        };
        let want = fold(&params, &vrep).unwrap();
        let mut b = TapeBuilder::new();
        let mu: Vec<_> = params.mu_hat.iter().map(|&v| b.constant(v)).collect();
        let la: Vec<_> = params.lambda_hat.iter().map(|&v| b.constant(v)).collect();
        let z = fold_node(&mut b, &vrep, &mu, &la).unwrap();
        let tape = b.finish().unwrap();
        let e = tape.forward(&[], &[]).unwrap();
        assert_relative_eq!(e.value(z[0]), want.beta, epsilon = 1e-12);
        for (node, w) in z[1..].iter().zip(&want.weights) {
            assert_relative_eq!(e.value(*node), *w, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let p = build_constraints(2, alpha(0.8), ConnectiveKind::And).unwrap();
        let vrep = h_to_v(&p).unwrap();
        assert_eq!(init_folded(&vrep, 5), init_folded(&vrep, 5));
        let zeroed = FoldedParams {
            mu_hat: vec![-1.0; vrep.rays.len()],
            lambda_hat: vec![0.0; vrep.vertices.len()],
        };
        let z = fold(&zeroed, &vrep).unwrap();
        let n = vrep.vertices.len() as f64;
        let centroid: f64 = vrep.vertices.iter().map(|v| v[0]).sum::<f64>() / n;
        assert_relative_eq!(z.beta, centroid, epsilon = 1e-12);
    }

    #[test]
    fn cache_shares_instances() {
        let a = cached_vrep(2, alpha(0.9), &ActiveSetEnumeration).unwrap();
        let b = cached_vrep(2, alpha(0.9), &ActiveSetEnumeration).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn combinations_count() {
        assert_eq!(Combinations::new(11, 6).count(), 462);
        assert_eq!(Combinations::new(3, 0).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }
}
