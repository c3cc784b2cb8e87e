use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lnn-ilp"))
        .args(args)
        .env_remove("LNN_ILP_DATA")
        .output()
        .expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = run(&["train", "--dataset", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn countries_train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("s2");
    let dataset = data().join("countries_s2");
    let trained = ok_json(&run(&["train", "--dataset", s(&dataset), "--epochs", "3", "--out", s(&out_dir)]));
    for f in ["checkpoint.json", "trace.csv", "report.json", "rules.txt"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let ckpt = out_dir.join("checkpoint.json");
    let evaluated = ok_json(&run(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&dataset)]));
    assert_eq!(trained["AUC-PR"], evaluated["AUC-PR"]);
    assert_eq!(trained["task"], "S2");

    let rules = run(&["export-rules", "--checkpoint", s(&ckpt)]);
    assert!(rules.status.success());
    let text = String::from_utf8(rules.stdout).unwrap();
    assert!(text.contains("S(X, Z) ←"), "{text}");
    assert!(text.contains("neighborOf") && text.contains("locatedIn"), "{text}");
}

#[test]
fn dataset_root_variable_resolves_relative_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lnn-ilp"))
        .args(["train", "--dataset", "countries_s1", "--epochs", "1", "--out", s(&dir.path().join("o"))])
        .env("LNN_ILP_DATA", data())
        .output()
        .unwrap();
    assert_eq!(ok_json(&out)["task"], "S1");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!("dataset = {:?}\nepochs = 1\nseed = 3\nout = {:?}\n", s(&data().join("countries_s1")), s(&out_dir)),
    )
    .unwrap();
    ok_json(&run(&["train", "--config", s(&config), "--epochs", "2"]));
    let trace = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3, "header plus one row per epoch:\n{trace}");

    std::fs::write(&config, "epochs = 1\nunknown_key = 2\n").unwrap();
    let bad = run(&["train", "--config", s(&config)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gridworld_train_and_eval_on_fresh_grids() {
    let dir = tempfile::tempdir().unwrap();
    let grids = dir.path().join("grids");
    let made = run(&["make-grids", "--out", s(&grids), "--train", "3", "--test", "4"]);
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));
    let out_dir = dir.path().join("run");
    let report = ok_json(&run(&["train", "--dataset", s(&grids), "--epochs", "2", "--out", s(&out_dir)]));
    assert_eq!(report["train_grids"], 3);
    assert!(out_dir.join("trace_GoSouth.csv").is_file());
    let ckpt = out_dir.join("checkpoint.json");
    let eval = ok_json(&run(&["eval", "--checkpoint", s(&ckpt), "--test-grids", "7", "--obstacles", "5"]));
    assert_eq!(eval["test_grids"], 7);
    let reward = eval["mean_reward"].as_f64().unwrap();
    assert!((-2.0..=1.0).contains(&reward));
    let rules = String::from_utf8(run(&["export-rules", "--checkpoint", s(&ckpt)]).stdout).unwrap();
    assert!(rules.contains("GoSouth(X, Y) ←") && rules.contains('¬'), "{rules}");
}

#[test]
fn eval_rejects_checkpoint_from_another_graph() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |name: &str, rel: &str| {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        for f in ["train.txt", "valid.txt", "test.txt"] {
            std::fs::write(d.join(f), format!("a\t{rel}\tb\nb\t{rel}\tc\na\tr2\tc\n")).unwrap();
        }
        d
    };
    let first = mk("first", "r1");
    let other = mk("other", "q1");
    let out_dir = dir.path().join("run");
    ok_json(&run(&["train", "--dataset", s(&first), "--epochs", "1", "--rule-len", "2", "--out", s(&out_dir)]));
    let bad = run(&["eval", "--checkpoint", s(&out_dir.join("checkpoint.json")), "--dataset", s(&other)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("relations"));
}

#[test]
fn polytope_prints_generators() {
    let v = ok_json(&run(&["polytope", "--arity", "2", "--alpha", "0.8"]));
    let vertices = v["generators"]["vertices"].as_array().expect("vertices");
    let has = vertices.iter().any(|z| {
        let z: Vec<f64> = z.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        z.iter().zip([1.4, 1.5, 1.5]).all(|(a, b)| (a - b).abs() < 1e-8)
    });
    assert!(has, "{v}");
    let infeasible = run(&["polytope", "--arity", "4", "--alpha", "0.7"]);
    assert_eq!(infeasible.status.code(), Some(1));
}
