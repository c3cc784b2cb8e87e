use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use lnn_ilp::grounder::{generate_facts, KnowledgeBase, Template};
use lnn_ilp::grounder::{GroundError, TemplateModel};
use lnn_ilp::operators::{LnnConnective, LnnPredCombiner};
use lnn_ilp::polytope::ActiveSetEnumeration;
use lnn_ilp::{AlphaConfig, Registry};
use proptest::prelude::*;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn toy() -> (KnowledgeBase, Template) {
    let kb = KnowledgeBase::load(format!("{FIXTURES}/toy_kb.tsv")).unwrap();
    let t = Template::load(format!("{FIXTURES}/toy_template.json")).unwrap();
    (kb, t)
}

fn model(t: Template, seed: u64) -> TemplateModel {
    TemplateModel::from_registry(t, &Registry::with_builtins(), "lnn-pred", "lnn", AlphaConfig::new(0.8).unwrap(), seed)
        .unwrap()
}

fn named(kb: &KnowledgeBase, rows: &[Vec<u32>]) -> BTreeSet<Vec<String>> {
    rows.iter().map(|r| kb.names(r)).collect()
}

#[test]
fn toy_grounding_matches_golden_tables() {
    let (kb, t) = toy();
    let golden: BTreeMap<String, BTreeSet<Vec<String>>> =
        serde_json::from_str(&std::fs::read_to_string(format!("{FIXTURES}/toy_golden.json")).unwrap()).unwrap();
    let facts = generate_facts(&kb, &t).unwrap();
    for name in ["P", "Q", "R", "O", "S"] {
        let i = t.node_index(name).unwrap();
        assert_eq!(named(&kb, &facts.node(i).facts), golden[name], "node {name}");
    }
    let r = t.node_index("R").unwrap();
    let inter = facts.node(r).intermediates.as_ref().unwrap();
    assert_eq!(inter.vars, ["X", "Y", "Z"]);
    assert_eq!(named(&kb, &inter.facts), golden["PQ"]);
}

#[test]
fn saturating_parameters_make_s1_true() {
    let (kb, t) = toy();
    let mut m = model(t.clone(), 0);
    for name in ["P", "Q", "O"] {
        let block = m.block(t.node_index(name).unwrap()).unwrap().clone();
        m.store_mut().set(block.slots["beta_hat"][0], 0.0);
        for &w in &block.slots["w_hat"] {
            m.store_mut().set(w, 1.0);
        }
    }
    for name in ["R", "S"] {
        let block = m.block(t.node_index(name).unwrap()).unwrap().clone();
        for &mu in &block.slots["mu_hat"] {
            m.store_mut().set(mu, -10.0);
        }
        // the binary system at 0.8 has the single vertex (1.4, 1.5, 1.5)
        assert_eq!(block.slots["lambda_hat"].len(), 1);
    }
    let net = m.ground(&kb).unwrap();
    assert_eq!(net.evaluate(m.store(), &["1", "5"]).unwrap(), 1.0);
    assert_eq!(net.evaluate(m.store(), &["1", "2"]).unwrap(), 1.0);
    let rules = m.rules().unwrap();
    let r = rules.iter().find(|r| r.node == "R").unwrap();
    assert!((r.op.beta.unwrap() - 1.4).abs() < 1e-12);
    assert!(matches!(net.evaluate(m.store(), &["5", "1"]), Err(GroundError::UnknownFact(_))));
}

#[test]
fn evaluation_is_deterministic() {
    let (kb, t) = toy();
    let m = model(t, 4);
    let net = m.ground(&kb).unwrap();
    let a = net.evaluate_all(m.store()).unwrap();
    let b = net.evaluate_all(m.store()).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn parameter_groups_do_not_grow_with_facts() {
    let (mut kb, t) = toy();
    let small = model(t.clone(), 1).param_groups().len();
    for i in 10..60 {
        kb.add_fact("A", &["1", &i.to_string()]).unwrap();
        kb.add_fact("C", &[&i.to_string(), "7"]).unwrap();
    }
    let m = model(t, 1);
    let net = m.ground(&kb).unwrap();
    assert!(net.len() > 50);
    assert_eq!(m.param_groups().len(), small);
    assert_eq!(small, 5);
}

#[test]
fn single_leaf_template() {
    let kb = KnowledgeBase::from_triples_str("a\tA\tb\n").unwrap();
    let t = Template::from_json(r#"{"name": "P", "vars": ["X", "Y"], "domain": ["A"]}"#).unwrap();
    let mut m = model(t, 0);
    let block = m.block(0).unwrap().clone();
    m.store_mut().set(block.slots["beta_hat"][0], 0.0);
    m.store_mut().set(block.slots["w_hat"][0], 1.0);
    let net = m.ground(&kb).unwrap();
    assert_eq!(net.tape().params().count(), 2);
    assert_eq!(net.evaluate(m.store(), &["a", "b"]).unwrap(), 1.0);
}

#[test]
fn empty_join_yields_no_facts() {
    let kb = KnowledgeBase::from_triples_str("1\tA\t2\n3\tC\t4\n").unwrap();
    let t = Template::from_json(
        r#"{"name": "R", "vars": ["X", "Z"], "op": "and", "children": [
            {"name": "P", "vars": ["X", "Y"], "domain": ["A"]},
            {"name": "Q", "vars": ["Y", "Z"], "domain": ["C"]}]}"#,
    )
    .unwrap();
    let facts = generate_facts(&kb, &t).unwrap();
    assert!(facts.root().is_empty());
}

#[test]
fn full_head_has_singleton_lineage() {
    let (kb, _) = toy();
    let t = Template::from_json(
        r#"{"name": "R", "vars": ["X", "Y", "Z"], "op": "and", "children": [
            {"name": "P", "vars": ["X", "Y"], "domain": ["A", "B"]},
            {"name": "Q", "vars": ["Y", "Z"], "domain": ["C"]}]}"#,
    )
    .unwrap();
    let facts = generate_facts(&kb, &t).unwrap();
    let root = facts.root();
    assert_eq!(root.len(), 1);
    assert_eq!(root.lineage[0], lnn_ilp::grounder::Lineage::And { intermediates: vec![0] });
}

#[test]
fn absent_fact_under_negation_counts_as_false() {
    let kb = KnowledgeBase::from_triples_str("a\tA\tb\nb\tB\ta\n").unwrap();
    let t = Template::from_json(
        r#"{"name": "N", "vars": ["X", "Y"], "op": "not", "children": [
            {"name": "P", "vars": ["X", "Y"], "domain": ["A"]}]}"#,
    )
    .unwrap();
    let m = model(t, 0);
    let net = m.ground(&kb).unwrap();
    // universe: X over {a}, Y over {b} (positions observed in A)
    assert_eq!(net.len(), 1);
    let t2 = Template::from_json(
        r#"{"name": "N", "vars": ["X", "Y"], "op": "not", "universe": {"X": ["a", "b"], "Y": ["a", "b"]},
            "children": [{"name": "P", "vars": ["X", "Y"], "domain": ["A"]}]}"#,
    )
    .unwrap();
    let m2 = model(t2, 0);
    let net2 = m2.ground(&kb).unwrap();
    assert_eq!(net2.len(), 4);
    assert_eq!(net2.evaluate(m2.store(), &["b", "a"]).unwrap(), 1.0);
    assert!(net2.evaluate(m2.store(), &["a", "b"]).unwrap() < 1.0);
}

#[test]
fn missing_domain_predicate_is_a_config_error() {
    let (kb, _) = toy();
    let t = Template::from_json(r#"{"name": "P", "vars": ["X", "Y"], "domain": ["Nope"]}"#).unwrap();
    assert!(matches!(generate_facts(&kb, &t), Err(GroundError::MissingPredicate { .. })));
}

#[test]
fn attention_leaves_compile() {
    let (kb, t) = toy();
    let m = TemplateModel::from_registry(t, &Registry::with_builtins(), "attention", "lnn", AlphaConfig::new(0.9).unwrap(), 2)
        .unwrap();
    let v = m.ground(&kb).unwrap().evaluate_all(m.store()).unwrap();
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
}

fn kb_from(a: &[(u8, u8)], b: &[(u8, u8)]) -> KnowledgeBase {
    let mut kb = KnowledgeBase::new();
    kb.declare("A", 2).unwrap();
    kb.declare("B", 2).unwrap();
    for (x, y) in a {
        kb.add_fact("A", &[&x.to_string(), &y.to_string()]).unwrap();
    }
    for (x, y) in b {
        kb.add_fact("B", &[&x.to_string(), &y.to_string()]).unwrap();
    }
    kb
}

const CHAIN: &str = r#"{"name": "R", "vars": ["X", "Z"], "op": "and", "children": [
    {"name": "P", "vars": ["X", "Y"], "domain": ["A"]},
    {"name": "Q", "vars": ["Y", "Z"], "domain": ["B"]}]}"#;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn join_matches_nested_loops(
        a in prop::collection::vec((0u8..8, 0u8..8), 0..100),
        b in prop::collection::vec((0u8..8, 0u8..8), 0..100),
    ) {
        let kb = kb_from(&a, &b);
        let t = Template::from_json(CHAIN).unwrap();
        let facts = generate_facts(&kb, &t).unwrap();
        let mut body = BTreeSet::new();
        let mut head = BTreeSet::new();
        for &(x, y) in &a {
            for &(y2, z) in &b {
                if y == y2 {
                    body.insert(vec![x.to_string(), y.to_string(), z.to_string()]);
                    head.insert(vec![x.to_string(), z.to_string()]);
                }
            }
        }
        let inter = facts.root().intermediates.as_ref().unwrap();
        prop_assert_eq!(named(&kb, &inter.facts), body);
        prop_assert_eq!(named(&kb, &facts.root().facts), head);
    }

    #[test]
    fn removing_base_facts_never_raises_truth(
        a in prop::collection::vec((0u8..5, 0u8..5), 1..40),
        b in prop::collection::vec((0u8..5, 0u8..5), 1..40),
        drop in 0usize..40,
        seed in 0u64..1000,
    ) {
        let t = Template::from_json(&format!(
            r#"{{"name": "S", "vars": ["X", "Z"], "op": "or", "children": [{CHAIN},
                {{"name": "O", "vars": ["X", "Z"], "domain": ["A", "B"]}}]}}"#
        )).unwrap();
        let conn = Arc::new(LnnConnective::new(Arc::new(ActiveSetEnumeration)));
        let comb = Arc::new(LnnPredCombiner { beta_init: 0.7, weight_init: 0.6, noise: 0.3 });
        let m = TemplateModel::new(t, comb, conn, AlphaConfig::new(0.8).unwrap(), seed).unwrap();
        let full = kb_from(&a, &b);
        let mut less = full.clone();
        let (x, y) = a[drop % a.len()];
        less.remove_fact("A", &[&x.to_string(), &y.to_string()]);
        let before = m.ground(&full).unwrap();
        let after = m.ground(&less).unwrap();
        let vb = before.evaluate_all(m.store()).unwrap();
        let va = after.evaluate_all(m.store()).unwrap();
        for (fact, v) in after.root_facts().iter().zip(&va) {
            let key: Vec<&str> = fact.iter().map(String::as_str).collect();
            let i = before.fact_index(&key).unwrap();
            prop_assert!(*v <= vb[i] + 1e-12);
        }
    }
}
