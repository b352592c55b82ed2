//! End-to-end tests of the `qoq` binary: every subcommand is exercised
//! through a real process, chained the way a user would chain them.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_qoq");

fn qoq(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("QOQ_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = qoq(args);
    assert!(
        out.status.success(),
        "qoq {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

/// Generates a tiny planted dataset and trains a small policy; the shared
/// prefix of most pipelines below.
fn gen_and_train(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = dir.join("train.jsonl");
    let val = dir.join("val.jsonl");
    let policy = dir.join("policy.ckpt");
    ok(&[
        "gen-data",
        "--n-success",
        "4",
        "--n-fail",
        "2",
        "--seed",
        "11",
        "--out",
        &s(&data),
    ]);
    ok(&[
        "gen-data",
        "--n-success",
        "2",
        "--n-fail",
        "0",
        "--seed",
        "99",
        "--out",
        &s(&val),
    ]);
    ok(&[
        "train",
        "--data",
        &s(&data),
        "--epochs",
        "30",
        "--batch",
        "32",
        "--lr",
        "3e-3",
        "--hidden",
        "8",
        "--seed",
        "1",
        "--out",
        &s(&policy),
    ]);
    (data, val, policy)
}

#[test]
fn gen_data_is_deterministic_and_reads_seed_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    let flags = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--n-success".into(),
            "3".into(),
            "--n-fail".into(),
            "1".into(),
            "--seed".into(),
            "7".into(),
            "--out".into(),
            s(out),
        ]
    };
    let run = |args: Vec<String>| {
        let out = Command::new(BIN)
            .args(&args)
            .env_remove("QOQ_SEED")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(flags(&a));
    run(flags(&b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // Same seed through the environment fallback instead of the flag.
    let out = Command::new(BIN)
        .args([
            "gen-data",
            "--n-success",
            "3",
            "--n-fail",
            "1",
            "--out",
            &s(&c),
        ])
        .env("QOQ_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = qoq(&["gen-data", "--n-success", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_single_line_with_stage_prefix() {
    let out = qoq(&[
        "score",
        "--train-grads",
        "/nonexistent/cache.grd",
        "--val-grads",
        "/nonexistent/cache.grd",
        "--out",
        "/nonexistent/out.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().next().unwrap_or_default();
    assert!(
        line.starts_with("ERROR(score): "),
        "unexpected stderr: {stderr}"
    );
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
}

#[test]
fn full_pipeline_reaches_an_accuracy_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val, policy) = gen_and_train(dir.path());
    let train_grads = dir.path().join("train.grd");
    let val_grads = dir.path().join("val.grd");
    let scores = dir.path().join("scores.csv");
    let selection = dir.path().join("selection.json");
    let curated = dir.path().join("curated.jsonl");

    for (ds, out) in [(&data, &train_grads), (&val, &val_grads)] {
        ok(&[
            "grads",
            "--policy",
            &s(&policy),
            "--data",
            &s(ds),
            "--sketch-dim",
            "64",
            "--oporp-seed",
            "5",
            "--out",
            &s(out),
        ]);
    }
    ok(&[
        "score",
        "--train-grads",
        &s(&train_grads),
        "--val-grads",
        &s(&val_grads),
        "--mode",
        "max",
        "--out",
        &s(&scores),
    ]);
    assert!(dir.path().join("scores.meta.json").exists());

    ok(&[
        "curate",
        "--scores",
        &s(&scores),
        "--data",
        &s(&data),
        "--budget",
        "match-success",
        "--out",
        &s(&selection),
        "--materialize",
        &s(&curated),
    ]);
    assert!(curated.exists());

    let out = ok(&[
        "eval",
        "accuracy",
        "--selection",
        &s(&selection),
        "--data",
        &s(&data),
        "--method",
        "qoq",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "qoq");
    assert_eq!(report["resolved_budget"], 4);
    let fraction = report["success_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fraction));

    let out = ok(&[
        "eval",
        "success",
        "--policy",
        &s(&policy),
        "--episodes",
        "3",
        "--seed",
        "2",
    ]);
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["episodes"], 3);
    let rate = line["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn rollout_labels_split_into_weighted_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _, policy) = gen_and_train(dir.path());
    let rollouts = dir.path().join("rollouts.jsonl");
    let train_grads = dir.path().join("train.grd");
    let pos = dir.path().join("pos.grd");
    let neg = dir.path().join("neg.grd");
    let scores = dir.path().join("rollout_scores.csv");
    let selection = dir.path().join("selection.json");

    ok(&[
        "rollout",
        "--policy",
        &s(&policy),
        "--episodes",
        "3",
        "--seed",
        "4",
        "--label-by-outcome",
        "--out",
        &s(&rollouts),
    ]);

    ok(&[
        "grads",
        "--policy",
        &s(&policy),
        "--data",
        &s(&data),
        "--sketch-dim",
        "64",
        "--out",
        &s(&train_grads),
    ]);
    for (filter, out) in [("success", &pos), ("failure", &neg)] {
        ok(&[
            "grads",
            "--policy",
            &s(&policy),
            "--data",
            &s(&rollouts),
            "--sketch-dim",
            "64",
            "--only",
            filter,
            "--out",
            &s(out),
        ]);
    }

    ok(&[
        "score",
        "rollout",
        "--train-grads",
        &s(&train_grads),
        "--pos",
        &s(&pos),
        "--neg",
        &s(&neg),
        "--weighting",
        "steps",
        "--out",
        &s(&scores),
    ]);
    assert!(dir.path().join("rollout_scores.meta.json").exists());

    ok(&[
        "curate",
        "--scores",
        &s(&scores),
        "--data",
        &s(&data),
        "--budget",
        "fixed:3",
        "--out",
        &s(&selection),
    ]);
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&selection).unwrap()).unwrap();
    assert_eq!(sel["selection"]["ids"].as_array().unwrap().len(), 3);
}

#[test]
fn baselines_select_and_retrieval_requires_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val, _) = gen_and_train(dir.path());
    let out_random = dir.path().join("random.json");
    let out_retrieval = dir.path().join("retrieval.json");

    ok(&[
        "baseline",
        "--method",
        "random",
        "--data",
        &s(&data),
        "--budget",
        "fixed:2",
        "--seed",
        "3",
        "--out",
        &s(&out_random),
    ]);
    let sel: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_random).unwrap()).unwrap();
    assert_eq!(sel["selection"]["ids"].as_array().unwrap().len(), 2);

    let out = qoq(&[
        "baseline",
        "--method",
        "retrieval",
        "--data",
        &s(&data),
        "--budget",
        "fixed:2",
        "--seed",
        "3",
        "--out",
        &s(&out_retrieval),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR(baseline): "));

    ok(&[
        "baseline",
        "--method",
        "retrieval",
        "--data",
        &s(&data),
        "--budget",
        "fixed:2",
        "--seed",
        "3",
        "--val",
        &s(&val),
        "--epochs",
        "20",
        "--batch",
        "32",
        "--out",
        &s(&out_retrieval),
    ]);
    assert!(out_retrieval.exists());
}

#[test]
fn consistency_ranks_trajectory_tables() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "traj_id,score,n_steps\n0,0.9,5\n1,0.5,5\n2,0.1,5\n").unwrap();
    std::fs::write(&b, "traj_id,score,n_steps\n0,0.8,5\n1,0.6,5\n2,0.2,5\n").unwrap();

    let out = ok(&["eval", "consistency", "--scores", &s(&a), "--scores", &s(&b)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["n_rankings"], 2);
    assert_eq!(report["n_items"], 3);
    // Identical orderings agree perfectly.
    assert_eq!(report["kendalls_w"].as_f64().unwrap(), 1.0);

    let out = qoq(&["eval", "consistency", "--scores", &s(&a)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn experiment_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let out_dir = dir.path().join("run");
    std::fs::write(
        &config,
        r#"{
  "seeds": [1],
  "n_success": 3,
  "n_fail": 1,
  "fail_modes": ["grasp_miss"],
  "n_val": 1,
  "hidden": [8],
  "epochs": 20,
  "batch_size": 32,
  "lr": 3e-3,
  "sketch_dim": 32,
  "eval_episodes": 2,
  "rollout_episodes": 2,
  "rollout_success_cap": 1
}
"#,
    )
    .unwrap();

    ok(&[
        "experiment",
        "--config",
        &s(&config),
        "--out",
        &s(&out_dir),
        "--parallelism",
        "2",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 1);
    assert!(report["summary"]["qoq_max"]["mean_accuracy"].is_f64());

    // Unknown config keys are rejected.
    std::fs::write(&config, r#"{"seeds": [1], "episodes": 5}"#).unwrap();
    let out = qoq(&["experiment", "--config", &s(&config), "--out", &s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR(experiment): "));
}
