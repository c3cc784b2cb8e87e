mod common;

use common::{close, oracle_vrep, same_set, unit_rays, ALPHAS};
use lnn_ilp::polytope::{
    build_constraints, fold, init_folded_with, ConnectiveKind, FoldedParams, HPolyhedron, InitScheme,
    VertexEnumerator,
};
use lnn_ilp::{AlphaConfig, Registry};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn enumerators() -> Vec<std::sync::Arc<dyn VertexEnumerator>> {
    let r = Registry::with_builtins();
    r.enumerator_names().into_iter().map(|n| r.enumerator(n).unwrap()).collect()
}

#[test]
fn converters_match_oracle_on_acceptance_grid() {
    for arity in 1..=5 {
        for alpha in ALPHAS {
            let raw = HPolyhedron::lnn_system(arity, alpha);
            let (vertices, rays) = oracle_vrep(&raw);
            match build_constraints(arity, AlphaConfig::new(alpha).unwrap(), ConnectiveKind::And) {
                Err(_) => assert!(vertices.is_empty(), "oracle finds points at n={arity} α={alpha}"),
                Ok(poly) => {
                    assert!(!vertices.is_empty());
                    for e in enumerators() {
                        let v = e.enumerate(&poly).unwrap();
                        assert!(same_set(&v.vertices, &vertices, 1e-8), "{} vertices n={arity} α={alpha}", e.name());
                        assert!(same_set(&unit_rays(&v.rays), &rays, 1e-8), "{} rays n={arity} α={alpha}", e.name());
                    }
                }
            }
        }
    }
}

#[test]
fn binary_alpha_08_has_known_vertex() {
    let poly = build_constraints(2, AlphaConfig::new(0.8).unwrap(), ConnectiveKind::And).unwrap();
    for e in enumerators() {
        let v = e.enumerate(&poly).unwrap();
        assert!(v.vertices.iter().any(|z| close(z, &[1.4, 1.5, 1.5], 1e-8)), "{}", e.name());
    }
}

#[test]
fn infeasible_combinations_are_rejected() {
    for (n, a) in [(3, 0.7), (4, 0.7), (5, 0.7), (4, 0.8), (5, 0.8)] {
        assert!(build_constraints(n, AlphaConfig::new(a).unwrap(), ConnectiveKind::And).is_err());
    }
}

#[test]
fn folded_samples_stay_feasible() {
    let scheme = InitScheme {
        mu_mean: 0.0,
        mu_std: 3.0,
        lambda_mean: 0.0,
        lambda_std: 3.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for arity in 1..=5 {
        for alpha in ALPHAS {
            let Ok(poly) = build_constraints(arity, AlphaConfig::new(alpha).unwrap(), ConnectiveKind::And) else {
                continue;
            };
            let vrep = enumerators()[0].enumerate(&poly).unwrap();
            for _ in 0..10_000 {
                let p = init_folded_with(&vrep, &scheme, &mut rng);
                let z = fold(&p, &vrep).unwrap();
                let mut point = vec![z.beta];
                point.extend(&z.weights);
                assert!(poly.contains(&point, 1e-7), "n={arity} α={alpha} z={point:?}");
            }
        }
    }
}

proptest! {
    #[test]
    fn fold_is_feasible_for_any_free_parameters(
        mu in prop::collection::vec(-50.0f64..50.0, 3),
        lambda in prop::collection::vec(-50.0f64..50.0, 3),
    ) {
        let poly = build_constraints(2, AlphaConfig::new(0.8).unwrap(), ConnectiveKind::And).unwrap();
        let vrep = enumerators()[0].enumerate(&poly).unwrap();
        prop_assume!(vrep.rays.len() == 3 && vrep.vertices.len() <= 3);
        let p = FoldedParams { mu_hat: mu, lambda_hat: lambda[..vrep.vertices.len()].to_vec() };
        let z = fold(&p, &vrep).unwrap();
        prop_assert!(z.is_lnn_feasible(0.8, 1e-7));
    }
}
