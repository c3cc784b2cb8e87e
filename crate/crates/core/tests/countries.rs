use std::collections::BTreeSet;
use std::path::Path;

use lnn_ilp::countries::{make_split, CountriesSplit, Task, World};

fn world() -> World {
    World::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/countries/world.tsv")).unwrap()
}

fn held(split: &CountriesSplit) -> BTreeSet<String> {
    split.valid.iter().chain(&split.test).map(|f| f[0].clone()).collect()
}

fn located(split: &CountriesSplit, who: &str) -> Vec<String> {
    split.train.iter().filter(|f| f[0] == who && f[1] == "locatedIn").map(|f| f[2].clone()).collect()
}

#[test]
fn world_table_shape() {
    let w = world();
    assert_eq!(w.countries().len(), 245);
    assert_eq!(w.regions().len(), 5);
    assert_eq!(w.subregions().len(), 24);
}

#[test]
fn splits_hide_what_each_task_promises() {
    let w = world();
    let regions: BTreeSet<String> = w.regions().into_iter().collect();
    for seed in 0..3 {
        for task in Task::ALL {
            let split = make_split(&w, task, seed).unwrap();
            let held = held(&split);
            assert_eq!(split.valid.len(), 20);
            assert_eq!(split.test.len(), 20);
            assert!(split.valid.iter().chain(&split.test).all(|q| q[1] == "locatedIn" && regions.contains(&q[2])));
            for c in &held {
                let facts = located(&split, c);
                match task {
                    Task::S1 => {
                        assert!(facts.iter().all(|r| !regions.contains(r)), "{c} keeps its region");
                        assert!(!facts.is_empty(), "{c} lost its subregion in S1");
                    }
                    Task::S2 | Task::S3 => assert!(facts.is_empty(), "{c} keeps locatedIn"),
                }
            }
            let neighbours: BTreeSet<&String> = split
                .train
                .iter()
                .filter(|f| f[1] == "neighborOf" && held.contains(&f[0]) && !held.contains(&f[2]))
                .map(|f| &f[2])
                .collect();
            for n in neighbours {
                assert_eq!(located(&split, n).is_empty(), task == Task::S3, "{} neighbour {n}", task.name());
            }
            // Queries are region facts of the world the split hides.
            let countries = w.facts();
            for q in split.valid.iter().chain(&split.test) {
                assert!(countries.contains(q));
                assert!(!split.train.contains(q));
            }
        }
    }
}

#[test]
fn splits_are_deterministic_and_round_trip() {
    let w = world();
    let a = make_split(&w, Task::S2, 4).unwrap();
    assert_eq!(a, make_split(&w, Task::S2, 4).unwrap());
    let dir = tempfile::tempdir().unwrap();
    a.save_dir(dir.path()).unwrap();
    assert_eq!(CountriesSplit::load_dir(dir.path()).unwrap(), a);
}

#[test]
fn episodes_apply_the_hiding_rule_to_one_country() {
    let w = world();
    let split = make_split(&w, Task::S2, 0).unwrap();
    let country = split.training_countries()[0].clone();
    let episode = split.episode(Task::S2, &country);
    assert!(episode.iter().all(|f| !(f[0] == country && f[1] == "locatedIn")));
    assert!(episode.iter().any(|f| f[0] == country && f[1] == "neighborOf"));
    // Only facts within one hop of the country survive for a two-atom body.
    let one_hop: BTreeSet<&String> = episode.iter().filter(|f| f[0] == country).map(|f| &f[2]).collect();
    assert!(episode.iter().all(|f| f[0] == country || one_hop.contains(&f[0])));
}
