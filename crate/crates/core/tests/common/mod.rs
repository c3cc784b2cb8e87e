#![allow(dead_code)]

use lnn_ilp::grounder::{GroundNetwork, KnowledgeBase, NodeOp, Template, TemplateModel, TemplateSpec};
use lnn_ilp::polytope::HPolyhedron;
use lnn_ilp::tape::Op;
use lnn_ilp::{AlphaConfig, Registry};
use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHAS: [f64; 5] = [0.7, 0.8, 0.9, 0.95, 1.0];

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn matrix(poly: &HPolyhedron, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), poly.dim(), |i, j| poly.a[rows[i]][j])
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn push_unique(set: &mut Vec<Vec<f64>>, v: Vec<f64>, tol: f64) {
    if !set.iter().any(|u| close(u, &v, tol)) {
        set.push(v);
    }
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Independent vertex and extreme-ray enumeration by solving every square
/// row subsystem with LU and every rank-deficient subsystem with SVD.
/// Rays are unit-normalized.
pub fn oracle_vrep(poly: &HPolyhedron) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = poly.dim();
    let tol = 1e-9;
    let mut vertices = Vec::new();
    for rows in subsets(poly.rows(), d) {
        let a = matrix(poly, &rows);
        let b = DVector::from_iterator(d, rows.iter().map(|&r| poly.b[r]));
        let Some(z) = a.clone().lu().solve(&b) else { continue };
        if (a * &z - b).amax() > 1e-9 {
            continue;
        }
        let z: Vec<f64> = z.iter().copied().collect();
        if poly.max_violation(&z) <= tol {
            push_unique(&mut vertices, z, 1e-8);
        }
    }
    let mut rays = Vec::new();
    for rows in subsets(poly.rows(), d - 1) {
        let a = matrix(poly, &rows);
        let svd = a.clone().svd(false, true);
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10).count();
        if rank != d - 1 {
            continue;
        }
        let vt = svd.v_t.expect("requested");
        // Null vector: the right singular vector of the (d−1)×d system not
        // spanned by its row space.
        let full = DMatrix::from_fn(d, d, |i, j| if i < vt.nrows() { vt[(i, j)] } else { 0.0 });
        let null = (0..d)
            .map(|e| {
                let mut v = DVector::zeros(d);
                v[e] = 1.0;
                let proj = full.transpose() * (&full * &v);
                v - proj
            })
            .max_by(|x, y| x.norm().total_cmp(&y.norm()))
            .expect("d ≥ 1");
        let null: Vec<f64> = null.iter().copied().collect();
        for sign in [1.0, -1.0] {
            let r: Vec<f64> = null.iter().map(|x| sign * x).collect();
            let r = unit(&r);
            let in_cone = poly.a.iter().all(|row| row.iter().zip(&r).map(|(p, q)| p * q).sum::<f64>() <= tol);
            if in_cone {
                push_unique(&mut rays, r, 1e-8);
            }
        }
    }
    (vertices, rays)
}

pub fn same_set(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.len() == b.len() && a.iter().all(|u| b.iter().any(|v| close(u, v, tol)))
}

pub fn unit_rays(rays: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rays.iter().map(|r| unit(r)).collect()
}

/// A random template of depth ≤ 3 with a random KB of ≤ 30 facts.
pub fn random_problem(rng: &mut ChaCha8Rng) -> (KnowledgeBase, TemplateSpec) {
    let preds = ["A", "B", "C", "D"];
    let mut kb = KnowledgeBase::new();
    for p in preds {
        kb.declare(p, 2).unwrap();
    }
    let n_facts = rng.random_range(4..=30);
    for _ in 0..n_facts {
        let p = preds.choose(rng).unwrap();
        let a = rng.random_range(1..=5).to_string();
        let b = rng.random_range(1..=5).to_string();
        kb.add_fact(p, &[&a, &b]).unwrap();
    }
    let dom = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..=3);
        let mut d: Vec<&str> = preds.choose_multiple(rng, k).copied().collect();
        d.sort();
        d
    };
    let op = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { NodeOp::And } else { NodeOp::Or };
    let spec = match rng.random_range(0..3) {
        0 => TemplateSpec::internal(
            "S",
            &["X", "Z"],
            NodeOp::And,
            vec![
                TemplateSpec::leaf("P", &["X", "Y"], &dom(rng)),
                TemplateSpec::leaf("Q", &["Y", "Z"], &dom(rng)),
            ],
        ),
        1 => TemplateSpec::internal(
            "S",
            &["X", "Y"],
            op(rng),
            vec![
                TemplateSpec::leaf("P", &["X", "Y"], &dom(rng)),
                TemplateSpec::leaf("Q", &["X", "Y"], &dom(rng)),
            ],
        ),
        _ => TemplateSpec::internal(
            "S",
            &["X", "Z"],
            NodeOp::Or,
            vec![
                TemplateSpec::internal(
                    "R",
                    &["X", "Z"],
                    NodeOp::And,
                    vec![
                        TemplateSpec::leaf("P", &["X", "Y"], &dom(rng)),
                        TemplateSpec::leaf("Q", &["Y", "Z"], &dom(rng)),
                    ],
                ),
                TemplateSpec::leaf("O", &["X", "Z"], &dom(rng)),
            ],
        ),
    };
    (kb, spec)
}

/// A random grounded network with jittered parameters, or `None` when the
/// template derives nothing.
pub fn random_network(seed: u64) -> Option<(TemplateModel, GroundNetwork)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kb, spec) = random_problem(&mut rng);
    let registry = Registry::with_builtins();
    let combiner = *["lnn-pred", "attention"].choose(&mut rng).unwrap();
    let connective = *["lnn", "product", "lukasiewicz"].choose(&mut rng).unwrap();
    let alpha = AlphaConfig::new(*[0.8, 0.9, 0.95, 1.0].choose(&mut rng).unwrap()).unwrap();
    let mut model =
        TemplateModel::from_registry(Template::from_spec(spec).unwrap(), &registry, combiner, connective, alpha, seed)
            .unwrap();
    for v in model.store_mut().values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let net = model.ground(&kb).unwrap();
    (!net.is_empty()).then_some((model, net))
}

/// Distance of every relu/relu1 argument from its kinks, and of every max
/// from a near-tie between distinct values. Exact ties are left in: their
/// branches are the same function of the parameters.
pub fn kink_distance(net: &GroundNetwork, params: &[f64]) -> f64 {
    let tape = net.tape();
    let eval = tape.forward(params, &[]).unwrap();
    let v = eval.values();
    let mut margin = f64::INFINITY;
    for op in tape.ops() {
        let m = match op {
            Op::Relu(a) => v[a.index()].abs(),
            Op::Relu1(a) => v[a.index()].abs().min((v[a.index()] - 1.0).abs()),
            Op::Max(xs) => {
                let top = xs.iter().map(|x| v[x.index()]).fold(f64::NEG_INFINITY, f64::max);
                xs.iter()
                    .map(|x| top - v[x.index()])
                    .filter(|g| *g > 0.0)
                    .fold(f64::INFINITY, f64::min)
            }
            _ => continue,
        };
        margin = margin.min(m);
    }
    margin
}

/// Worst relative error between the analytic gradient of `Σ cᵢ·outᵢ` and
/// central differences with step `h`.
pub fn gradient_error(net: &GroundNetwork, params: &[f64], coeffs: &[f64], h: f64) -> f64 {
    let tape = net.tape();
    let objective = |p: &[f64]| {
        let e = tape.forward(p, &[]).unwrap();
        net.outputs().iter().zip(coeffs).map(|(o, c)| c * e.value(*o)).sum::<f64>()
    };
    let eval = tape.forward(params, &[]).unwrap();
    let seeds: Vec<_> = net.outputs().iter().copied().zip(coeffs.iter().copied()).collect();
    let grad = tape.backward_seeded(&eval, &seeds).unwrap();
    let mut worst: f64 = 0.0;
    for pid in tape.params() {
        let mut p = params.to_vec();
        p[pid.0] += h;
        let up = objective(&p);
        p[pid.0] -= 2.0 * h;
        let down = objective(&p);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.get(pid).unwrap_or(0.0);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Rank-by-rank enumeration of every position the truth can take inside
/// its tie group.
pub fn brute_mrr_hits(n: usize, m: usize, k: usize) -> (f64, f64) {
    let higher = vec![2.0; n];
    let tied = vec![1.0; m];
    let mut rr = 0.0;
    let mut hits = 0usize;
    for slot in 0..m {
        let ordered: Vec<(f64, bool)> = higher
            .iter()
            .map(|&s| (s, false))
            .chain(tied.iter().enumerate().map(|(i, &s)| (s, i == slot)))
            .collect();
        let rank = ordered.iter().position(|e| e.1).unwrap() + 1;
        rr += 1.0 / rank as f64;
        hits += usize::from(rank <= k);
    }
    (rr / m as f64, hits as f64 / m as f64)
}

/// Step-curve AUC-PR (×100) from one threshold per distinct score.
pub fn oracle_auc_pr(examples: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = examples.iter().map(|e| e.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total = examples.iter().filter(|e| e.1).count() as f64;
    let mut prev = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let predicted: Vec<&(f64, bool)> = examples.iter().filter(|e| e.0 >= t).collect();
        let tp = predicted.iter().filter(|e| e.1).count() as f64;
        let recall = tp / total;
        area += (recall - prev) * tp / predicted.len() as f64;
        prev = recall;
    }
    100.0 * area
}
