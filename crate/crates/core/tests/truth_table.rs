use lnn_ilp::grounder::NodeOp;
use lnn_ilp::train::{fit, Example, Loss, TapeObjective, TrainConfig};
use lnn_ilp::{AlphaConfig, ParamStore, Registry, TapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ROWS: [(f64, f64); 4] = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)];

fn fit_table(op: NodeOp, alpha: f64, seed: u64) -> Vec<f64> {
    let connective = Registry::with_builtins().connective("lnn").unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = connective
        .allocate(&mut store, "and", 2, AlphaConfig::new(alpha).unwrap(), &mut rng)
        .unwrap();
    let mut b = TapeBuilder::new();
    let decoded = connective.decode(&mut b, &block).unwrap();
    let mut examples = Vec::new();
    for (x, y) in ROWS {
        let inputs = [b.constant(x), b.constant(y)];
        let node = match op {
            NodeOp::Or => connective.disjoin(&mut b, &decoded, &inputs),
            _ => connective.conjoin(&mut b, &decoded, &inputs),
        };
        let target = match op {
            NodeOp::Or => x.max(y),
            _ => x.min(y),
        };
        examples.push(Example { tape: 0, node, target });
    }
    let tape = b.finish().unwrap();
    let cfg = TrainConfig {
        step_size: 0.1,
        batch_size: 4,
        epochs: 2000,
        seed,
        alpha,
        ..TrainConfig::default()
    };
    {
        let mut obj = TapeObjective::new(&mut store, vec![tape.clone()], examples.clone(), Loss::Squared, 4);
        fit(&mut obj, &cfg).unwrap();
    }
    let eval = tape.forward(store.values(), &[]).unwrap();
    examples.iter().map(|e| eval.value(e.node)).collect()
}

#[test]
fn binary_and_learns_its_truth_table() {
    for seed in 0..3 {
        let out = fit_table(NodeOp::And, 0.7, seed);
        for (row, v) in ROWS.iter().zip(&out) {
            if row.0 == 1.0 && row.1 == 1.0 {
                assert!(*v >= 0.7, "seed {seed} {row:?} → {v}");
            } else {
                assert!(*v <= 0.3, "seed {seed} {row:?} → {v}");
            }
        }
    }
}

#[test]
fn binary_or_learns_its_truth_table() {
    let out = fit_table(NodeOp::Or, 0.7, 0);
    for (row, v) in ROWS.iter().zip(&out) {
        if row.0 == 0.0 && row.1 == 0.0 {
            assert!(*v <= 0.3, "{row:?} → {v}");
        } else {
            assert!(*v >= 0.7, "{row:?} → {v}");
        }
    }
}
