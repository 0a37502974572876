use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use grouptopo::graph::{decode_graph, decode_pool, encode_graph, encode_pool, write_trajectories};
use grouptopo::pool::bundled_math_pool;
use grouptopo::{GroupGraph, Trajectory};
use serde_json::Value;
use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grouptopo"))
        .args(args)
        .env_remove("GOA_LLM_URL")
        .env_remove("GOA_LLM_KEY")
        .env_remove("GOA_ENCODER_URL")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is json")
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().expect("exit code")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = path(dir, name);
    fs::write(&p, text).unwrap();
    p
}

fn id(name: &str) -> usize {
    bundled_math_pool().find_by_name(name).unwrap().id
}

fn overfit_set() -> Vec<Trajectory> {
    let items: [(&str, Vec<usize>, Vec<(usize, usize)>); 6] = [
        ("What is 12 + 30?", vec![id("Solver Group")], vec![]),
        ("Prove the sum of two odd numbers is even", vec![id("Analyst Group"), id("Solver Group")], vec![(0, 1)]),
        ("Write code to list primes below 50", vec![id("Programming Group"), id("Inspection Group")], vec![(0, 1)]),
        (
            "How many ways can 5 people sit in a row",
            vec![id("Analyst Group"), id("Programming Group"), id("Inspection Group")],
            vec![(0, 1), (0, 2), (1, 2)],
        ),
        ("Check whether 91 is prime", vec![id("Inspection Group")], vec![]),
        ("Find the area of a circle of radius 3", vec![id("Plan-Solve Chain"), id("Solver Group")], vec![(0, 1)]),
    ];
    items
        .into_iter()
        .map(|(q, sel, e)| Trajectory {
            query: q.into(),
            gold: None,
            graph: GroupGraph::new(sel, e),
            success: true,
            token_cost: 0,
        })
        .collect()
}

fn train_overfit(dir: &TempDir, name: &str) -> PathBuf {
    let data = write(dir, "overfit.jsonl", &write_trajectories(&overfit_set()));
    let ck = path(dir, name);
    let summary = ok(&[
        "train", "--dataset", s(&data), "--checkpoint", s(&ck), "--d", "32", "--h", "16", "--t-max", "4",
        "--epochs", "200", "--batch", "8", "--lr", "1e-2", "--weight-decay", "0", "--beta-g", "0", "--beta-e",
        "0.01", "--seed", "5",
    ]);
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["epochs"], 200);
    ck
}

#[test]
fn discover_writes_bundled_pool() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "pool.json");
    let summary = ok(&["discover", "--out", s(&out), "--seed", "9"]);
    assert_eq!(summary["seed"], 9);
    assert_eq!(summary["groups"], 16);
    let pool = decode_pool(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(pool, bundled_math_pool());
}

#[test]
fn duplicate_ids_in_template_fail_validation() {
    let dir = TempDir::new().unwrap();
    let mut v: Value = serde_json::from_str(&encode_pool(&bundled_math_pool())).unwrap();
    v["groups"][1]["id"] = v["groups"][0]["id"].clone();
    let tpl = write(&dir, "tpl.json", &v.to_string());
    let out = path(&dir, "pool.json");
    assert_eq!(code(&["discover", "--pool", s(&tpl), "--out", s(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn malformed_proposals_are_rejected_and_valid_subset_written() {
    let dir = TempDir::new().unwrap();
    let reply = [
        r#"{"name": "Proof Team", "expertise": "proofs", "roles": ["Mathematical Analyst"], "intra_topology": "single"}"#,
        r#"{"name": "Broken", "roles": "not a list"}"#,
        r#"this is not json"#,
        r#"{"name": "Code Team", "expertise": "programs", "roles": ["Programming Expert", "Inspector"], "intra_topology": "chain"}"#,
    ]
    .join("\n");
    let resp = write(&dir, "reply.txt", &reply);
    let out = path(&dir, "pool.json");
    let summary = ok(&["discover", "--response", s(&resp), "--out", s(&out)]);
    assert_eq!(summary["groups"], 2);
    let rejected: Vec<u64> = summary["rejected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["record"].as_u64().unwrap())
        .collect();
    assert_eq!(rejected, [2, 3]);
    let pool = decode_pool(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(pool.len(), 2);

    let bad = write(&dir, "bad.txt", "nothing useful here");
    assert_eq!(code(&["discover", "--response", s(&bad), "--out", s(&path(&dir, "none.json"))]), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["run", "--query", "x", "--out", "o.json"]), 1);
    assert_eq!(code(&["generate", "--checkpoint", "c.json", "--query", "q", "--rounds", "abc"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = path(&dir, "absent.jsonl");
    let out = path(&dir, "o.json");
    assert_eq!(code(&["train", "--dataset", s(&missing), "--checkpoint", s(&out)]), 2);
    assert_eq!(code(&["curate", "--dataset", s(&missing), "--out", s(&out)]), 2);
    assert_eq!(code(&["generate", "--checkpoint", s(&missing), "--query", "q"]), 2);
    assert!(!out.exists());
}

#[test]
fn run_on_single_group_makes_two_calls() {
    let dir = TempDir::new().unwrap();
    let g = write(&dir, "g.json", &encode_graph(&GroupGraph::new(vec![id("Solver Group")], [])));
    let out = path(&dir, "t.json");
    let summary = ok(&[
        "run", "--graph", s(&g), "--query", "What is 6 x 7?", "--rounds", "1", "--out", s(&out), "--seed", "4",
    ]);
    assert_eq!(summary["calls"], 2);
    assert_eq!(summary["seed"], 4);
    let record: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(record["transcript"]["records"].as_array().unwrap().len(), 2);
    assert!(record["transcript"]["final_answer"].as_str().unwrap().ends_with("Answer: 42"));
    assert_eq!(record["seed"], 4);
    let stats = &record["stats"];
    let total = stats["prompt_tokens"].as_u64().unwrap() + stats["response_tokens"].as_u64().unwrap();
    assert_eq!(summary["total_tokens"].as_u64().unwrap(), total);
}

#[test]
fn run_is_bit_reproducible() {
    let dir = TempDir::new().unwrap();
    let g = GroupGraph::new(vec![id("Analyst Group"), id("Solve-Check Chain"), id("Solver Council")], [(0, 1), (0, 2)]);
    let g = write(&dir, "g.json", &encode_graph(&g));
    let (a, b) = (path(&dir, "a.json"), path(&dir, "b.json"));
    for out in [&a, &b] {
        ok(&["run", "--graph", s(&g), "--query", "What is 9 + 16?", "--mode", "expanded", "--out", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn http_backend_without_endpoint_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let g = write(&dir, "g.json", &encode_graph(&GroupGraph::new(vec![0], [])));
    let out = path(&dir, "t.json");
    assert_eq!(code(&["run", "--graph", s(&g), "--query", "q", "--backend", "http", "--out", s(&out)]), 3);
    assert_eq!(code(&["discover", "--backend", "http", "--out", s(&out)]), 3);
    assert!(!out.exists());
}

#[test]
fn trained_checkpoint_reproduces_training_graphs() {
    let dir = TempDir::new().unwrap();
    let ck = train_overfit(&dir, "model.json");
    assert!(path(&dir, "model.json.log.jsonl").exists());
    for t in overfit_set() {
        let out = path(&dir, "g.json");
        let dot = path(&dir, "g.dot");
        ok(&["generate", "--checkpoint", s(&ck), "--query", &t.query, "--out", s(&out), "--dot", s(&dot)]);
        let g = decode_graph(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(g, t.graph, "query {:?}", t.query);
        assert!(fs::read_to_string(&dot).unwrap().starts_with("digraph"));
    }
}

#[test]
fn training_is_bit_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = train_overfit(&dir, "a.json");
    let b = train_overfit(&dir, "b.json");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(path(&dir, "a.json.log.jsonl")).unwrap(),
        fs::read(path(&dir, "b.json.log.jsonl")).unwrap()
    );
}

#[test]
fn curate_writes_dataset_and_report() {
    let dir = TempDir::new().unwrap();
    let queries = write(
        &dir,
        "q.jsonl",
        "{\"query\": \"What is 3 + 4?\", \"gold\": \"7\"}\n{\"query\": \"What is 5 x 6?\", \"gold\": \"30\"}\n{\"query\": \"Name a colour\", \"gold\": \"blue\", \"rule\": {\"kind\": \"exact\"}}\n",
    );
    let out = path(&dir, "cur.jsonl");
    let summary = ok(&["curate", "--dataset", s(&queries), "--out", s(&out), "--samples", "4", "--rounds", "1", "--seed", "3", "--resample", "1"]);
    assert_eq!(summary["kept"], 2);
    assert_eq!(summary["excluded"], 1);
    let report: Value = serde_json::from_str(&fs::read_to_string(path(&dir, "cur.jsonl.report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["excluded"][0], "Name a colour");
    let kept = grouptopo::graph::read_trajectories(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(kept.iter().all(|t| t.success));
}

#[test]
fn attack_lowers_accuracy() {
    let dir = TempDir::new().unwrap();
    let queries: String = (1..=5).map(|i| format!("{{\"query\": \"What is {i} + {i}?\", \"gold\": \"{}\"}}\n", 2 * i)).collect();
    let q = write(&dir, "q.jsonl", &queries);
    let g = write(&dir, "g.json", &encode_graph(&GroupGraph::new(vec![id("Solver Group")], [])));
    let out = path(&dir, "attack.json");
    let summary = ok(&["attack", "--dataset", s(&q), "--graph", s(&g), "--out", s(&out), "--seed", "2"]);
    assert_eq!(summary["clean_accuracy"], 1.0);
    assert_eq!(summary["attacked_accuracy"], 0.0);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["seed"], 2);
    assert_eq!(report["attacked"]["items"].as_array().unwrap().len(), 5);
}

#[test]
fn sweep_reports_every_cell() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "d.jsonl", &write_trajectories(&overfit_set()));
    let out = path(&dir, "sweep.json");
    let summary = ok(&[
        "sweep", "--dataset", s(&data), "--out", s(&out), "--beta-g", "0,0.3", "--beta-e", "0,0.3", "--d", "16",
        "--h", "8", "--t-max", "4", "--epochs", "3", "--warmup", "1", "--batch", "6", "--rounds", "1",
    ]);
    assert_eq!(summary["cells"], 4);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    let grid: Vec<(f64, f64)> = cells
        .iter()
        .map(|c| (c["beta_g"].as_f64().unwrap(), c["beta_e"].as_f64().unwrap()))
        .collect();
    assert_eq!(grid, [(0.0, 0.0), (0.0, 0.3), (0.3, 0.0), (0.3, 0.3)]);
    for c in cells {
        let r = c["reconstruction_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn failed_write_leaves_no_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("missing-dir").join("pool.json");
    assert_eq!(code(&["discover", "--out", s(&out)]), 2);
    assert!(!out.exists());
}
