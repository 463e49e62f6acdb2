use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use pcomb::config::RunConfig;

const SMOKE: &str = r#"{
  "seed": 3,
  "data": {"n_sequences": 4, "T": 20, "n_headings": 2},
  "model": {"S": 2},
  "train": {"K": 32, "epochs": 50, "batch": 2}
}"#;

fn pcomb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcomb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Every file below `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn full_pipeline(workers: &str) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("smoke.json"), SMOKE).unwrap();
    for cmd in ["simulate", "train", "vbem", "evaluate"] {
        let out = pcomb(dir.path(), &[cmd, "--config", "smoke.json", "--out", "run", "--workers", workers]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty(), "{cmd} wrote to stdout");
    }
    snapshot(dir.path())
}

#[test]
fn pipeline_is_byte_identical_across_worker_counts() {
    let one = full_pipeline("1");
    let three = full_pipeline("3");
    let names: Vec<&str> = one.keys().map(String::as_str).collect();
    assert_eq!(
        names,
        [
            "run/curves.csv",
            "run/dataset.csv",
            "run/report.json",
            "run/train_log.jsonl",
            "run/vbem_params.json",
            "run/wake_sleep_params.json",
            "smoke.json",
        ]
    );
    assert_eq!(one, three);

    let report: serde_json::Value = serde_json::from_slice(&one["run/report.json"]).unwrap();
    for method in ["wake_sleep", "vbem"] {
        let tv = report[method]["transition_error"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&tv));
    }
    let echoed = RunConfig::from_json(&report["config"].to_string()).unwrap();
    let mut expected = RunConfig::from_json(SMOKE).unwrap();
    expected.output.directory = "run".into();
    assert_eq!(echoed, expected);
    let hash = expected.hash();
    assert_eq!(report["config_hash"], hash.as_str());
    assert_eq!(report["seed"], 3);

    for name in ["run/dataset.csv", "run/curves.csv"] {
        let text = String::from_utf8(one[name].clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# seed=3 config_hash={hash}"));
    }
    let curves = String::from_utf8(one["run/curves.csv"].clone()).unwrap();
    assert_eq!(curves.lines().nth(1), Some("epoch,mean_log_evidence"));
    assert_eq!(curves.lines().count(), 2 + 50);
    for line in String::from_utf8(one["run/train_log.jsonl"].clone()).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], hash.as_str());
        assert!(v["mean_log_evidence"].is_number());
    }
    for name in ["run/wake_sleep_params.json", "run/vbem_params.json"] {
        let v: serde_json::Value = serde_json::from_slice(&one[name]).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["config_hash"], hash.as_str());
    }
}

#[test]
fn simulate_twice_gives_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), SMOKE).unwrap();
    let read = |sub: &str| {
        assert!(pcomb(dir.path(), &["simulate", "--config", "c.json", "--out", sub]).status.success());
        std::fs::read(dir.path().join(sub).join("dataset.csv")).unwrap()
    };
    let first = read("a");
    std::fs::rename(dir.path().join("a"), dir.path().join("b")).unwrap();
    assert_eq!(first, read("a"));
    let other_seed = {
        assert!(pcomb(dir.path(), &["simulate", "--config", "c.json", "--out", "a", "--seed", "4"]).status.success());
        std::fs::read(dir.path().join("a/dataset.csv")).unwrap()
    };
    assert_ne!(first, other_seed);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("typo.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    std::fs::write(dir.path().join("tau.json"), r#"{"train": {"tau": 1.5}}"#).unwrap();
    std::fs::write(dir.path().join("zero.json"), r#"{"model": {"S": 0}}"#).unwrap();
    let cases: [(&[&str], &str); 6] = [
        (&["simulate", "--config", "typo.json"], "$.train.epochz"),
        (&["train", "--config", "tau.json"], "$.train.tau"),
        (&["vbem", "--config", "zero.json"], "$.model.S"),
        (&["simulate", "--config", "missing.json"], "missing.json"),
        (&["evaluate", "--out", "empty"], "wake_sleep_params.json"),
        (&["frobnicate"], "frobnicate"),
    ];
    for (args, needle) in cases {
        let out = pcomb(dir.path(), args);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {stderr}");
        assert!(stderr.contains(needle), "{args:?}: {stderr}");
    }
    assert_eq!(pcomb(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // A file where the output directory should go cannot be created.
    std::fs::write(dir.path().join("blocked"), "").unwrap();
    let out = pcomb(dir.path(), &["simulate", "--out", "blocked/run"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn selfcheck_reports_each_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcomb(dir.path(), &["selfcheck", "--suite", "weight-arithmetic"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.lines().all(|l| l.starts_with("PASS [weight-arithmetic]")));
    assert!(snapshot(dir.path()).is_empty(), "selfcheck wrote files");
    let bad = pcomb(dir.path(), &["selfcheck", "--suite", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}
