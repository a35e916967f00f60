//! Exit codes, manifests and side effects of the `ctxsub` binary.

use std::path::Path;
use std::process::{Command, Output};

fn ctxsub(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxsub"))
        .current_dir(dir)
        .env_remove("CTXSUB_THREADS")
        .args(args)
        .output()
        .unwrap()
}

fn gen(dir: &Path) {
    let out = ctxsub(dir, &["gen", "--dim", "8", "--clusters", "4", "--bank", "40", "--episodes", "30", "--k", "3", "--seed", "1", "--out", "data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn gen_writes_outputs_and_one_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    assert_eq!(
        entries(&dir.path().join("data")),
        ["bank.nedb", "bank.nedb.ids.json", "clusters.json", "episodes.jsonl", "manifest.json"]
    );
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["clusters"], 4);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["version"].is_string());
}

#[test]
fn usage_errors_exit_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let before = entries(dir.path());
    let cases: [&[&str]; 6] = [
        &["gen", "--out", "x"],
        &["gen", "--clusters", "1", "--seed", "1", "--out", "x"],
        &["embed", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--eta", "2", "--eta-prime", "3", "--out", "x"],
        &["train", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--lr", "-1", "--seed", "1", "--out", "x"],
        &["sweep", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--grid", "bogus=1", "--seed", "1", "--out", "x"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = ctxsub(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(entries(dir.path()), before);
}

#[test]
fn usage_error_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxsub(dir.path(), &["gen", "--out", "x"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn runtime_errors_exit_1_with_the_error_text() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = ctxsub(dir.path(), &["index", "--bank", "missing.nedb", "--seed", "1", "--out", "i.neix"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.nedb"));

    std::fs::write(dir.path().join("junk.nedb"), b"JUNK").unwrap();
    std::fs::write(dir.path().join("junk.nedb.ids.json"), b"[]").unwrap();
    let out = ctxsub(dir.path(), &["index", "--bank", "junk.nedb", "--seed", "1", "--out", "i.neix"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("i.neix").exists());
    assert!(!dir.path().join("i.neix.manifest.json").exists());
}

#[test]
fn commands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    let bank = read("data/bank.nedb");
    let episodes = read("data/episodes.jsonl");
    for args in [
        &["embed", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--eta", "3", "--eta-prime", "2", "--out", "emb"][..],
        &["train", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--epochs", "2", "--seed", "4", "--out", "head"],
        &["eval", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--head", "head", "--l", "1,3", "--out", "r.json"],
    ] {
        let out = ctxsub(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read("data/bank.nedb"), bank);
    assert_eq!(read("data/episodes.jsonl"), episodes);
    let report: serde_json::Value = serde_json::from_slice(&read("r.json")).unwrap();
    assert!(report["R@1"].as_f64().unwrap() <= report["R@3"].as_f64().unwrap());
    assert!(dir.path().join("r.json.manifest.json").exists());
    // 30 episodes, two subspaces each, two directions per subspace.
    let ids: Vec<String> = serde_json::from_slice(&read("emb/basis.nedb.ids.json")).unwrap();
    assert_eq!(ids.len(), 120);
    assert_eq!(ids[0], "e0/pos/0");
}

#[test]
fn sweep_skips_points_with_eta_prime_above_eta() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = ctxsub(
        dir.path(),
        &["sweep", "--bank", "data/bank.nedb", "--episodes", "data/episodes.jsonl", "--test-episodes", "10", "--grid", "eta=1..2,eta_prime=0..2", "--epochs", "1", "--seed", "2", "--out", "s"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(std::fs::read(dir.path().join("s.csv")).unwrap()).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "param:eta,param:eta_prime,metric,value,seed");
    let points: Vec<String> = rows[1..].iter().map(|r| r.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(points, ["1,0", "1,1", "2,0", "2,1", "2,2"]);
    let jsonl = std::fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 5);
}

#[test]
fn gradcheck_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxsub(dir.path(), &["gradcheck", "--instances", "20", "--seed", "3", "--out", "g.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
}
