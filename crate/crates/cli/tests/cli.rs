//! End-to-end runs of the `flowdirect` binary.

use std::path::Path;
use std::process::{Command, Output};

fn flowdirect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdirect"))
        .args(args)
        .env_remove("FLOWDIRECT_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = flowdirect(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    flowdirect(args).status.code().expect("exit code")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join("manifest.json"))).unwrap()
}

fn without_times(mut m: serde_json::Value) -> serde_json::Value {
    let obj = m.as_object_mut().unwrap();
    obj.remove("started_unix_ms");
    obj.remove("finished_unix_ms");
    m
}

fn column_mean(csv: &str, col: usize) -> f64 {
    let values: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn optimize_small(out: &Path, reward: &str, seed: &str) {
    let o = out.to_str().unwrap();
    ok(&[
        "optimize", "--model", "gauss:0,0:1", "--reward", reward, "--L", "3", "--N", "32", "--T", "20", "--seed", seed,
        "--out", o,
    ]);
}

#[test]
fn optimize_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    optimize_small(&a, "linear:1,0", "7");
    optimize_small(&b, "linear:1,0", "7");
    for name in ["dataset.txt", "metrics.csv", "samples.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["reward_evaluations"], 96);
    assert_eq!(ma["config"]["L"], 3);
    assert!(ma["started_unix_ms"].as_u64().unwrap() <= ma["finished_unix_ms"].as_u64().unwrap());
    let strip_out = |mut m: serde_json::Value| {
        m["config"]["sampling"]["out"] = serde_json::Value::Null;
        without_times(m)
    };
    assert_eq!(strip_out(ma), strip_out(mb));

    let metrics = read(&a.join("metrics.csv"));
    assert!(metrics.starts_with("iter,evals,mean_reward,best_reward,mean_coord_1,mean_coord_2\n"));
    assert_eq!(metrics.lines().count(), 4);
    assert!(read(&a.join("dataset.txt")).starts_with("flowdirect-dataset v1 dim=2 reward=\"linear:1,0\"\n"));
    assert_eq!(read(&a.join("samples.csv")).lines().count(), 33);
}

#[test]
fn budget_of_sixteen_by_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&[
        "optimize", "--model", "gauss:0:1", "--reward", "linear:1", "--L", "100", "--N", "16", "--T", "4", "--out", o,
    ]);
    assert_eq!(manifest(dir.path())["reward_evaluations"], 1600);
    assert_eq!(read(&dir.path().join("dataset.txt")).lines().count(), 1601);
}

#[test]
fn config_file_and_environment_fill_unset_flags() {
    let dir = tempfile::tempdir().unwrap();
    let flags = dir.path().join("flags");
    optimize_small(&flags, "linear:1,0", "3");

    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "model = \"gauss:0,0:1\"\nreward = \"linear:1,0\"\nL = 3\nN = 32\nT = 20\nseed = 99\n",
    )
    .unwrap();
    let layered = dir.path().join("layered");
    let out = Command::new(env!("CARGO_BIN_EXE_flowdirect"))
        .args(["optimize", "--config", config.to_str().unwrap(), "--seed", "3"])
        .env("FLOWDIRECT_OUT", &layered)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(flags.join("dataset.txt")).unwrap(),
        std::fs::read(layered.join("dataset.txt")).unwrap()
    );

    std::fs::write(&config, "modle = \"gauss:0:1\"\n").unwrap();
    assert_eq!(code(&["optimize", "--config", config.to_str().unwrap()]), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["launch"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0", "--reward", "linear:1,0"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1", "--reward", "linear:1"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--mode", "fast"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--dim", "3"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--N", "0"]), 2);
    assert_eq!(code(&["optimize", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--T", "0"]), 2);
    assert_eq!(code(&["baseline", "--method", "grid", "--model", "gauss:0:1", "--reward", "linear:1"]), 2);
    assert_eq!(code(&["reuse", "--model", "gauss:0:1", "--dataset", "d.txt"]), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("out");
    let o = o.to_str().unwrap();
    let missing = dir.path().join("missing.txt");
    assert_eq!(
        code(&["reuse", "--model", "gauss:0:1", "--dataset", missing.to_str().unwrap(), "--alpha", "1", "--out", o]),
        1
    );
    let out = flowdirect(&[
        "optimize", "--model", "gauss:0:1", "--reward", "cmd:exit 3", "--L", "2", "--N", "4", "--T", "5", "--out", o,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exited with"));
}

#[test]
fn failing_reward_keeps_completed_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let counter = dir.path().join("calls");
    // Succeeds on the first call, fails on the second.
    let script = format!(
        "cmd:if [ -f {c} ]; then exit 4; fi; touch {c}; sed 's/ .*//' batch.txt > rewards.txt",
        c = counter.display()
    );
    let o = dir.path().join("out");
    let out = flowdirect(&[
        "optimize", "--model", "gauss:0,0:1", "--reward", &script, "--L", "3", "--N", "5", "--T", "5", "--out",
        o.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let dataset = read(&o.join("dataset.txt"));
    assert_eq!(dataset.lines().count(), 6);
    assert!(dataset.lines().skip(1).all(|l| l.starts_with("0 ")));
}

#[test]
fn reuse_and_compose_use_no_reward_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    optimize_small(&da, "linear:1,0", "1");
    optimize_small(&db, "linear:0,1", "2");
    let dataset_a = da.join("dataset.txt");
    let dataset_b = db.join("dataset.txt");

    let reuse_dir = dir.path().join("reuse");
    ok(&[
        "reuse", "--model", "gauss:0,0:1", "--dataset", dataset_a.to_str().unwrap(), "--alpha", "0.5", "--N", "200",
        "--T", "20", "--seed", "5", "--out", reuse_dir.to_str().unwrap(),
    ]);
    assert_eq!(manifest(&reuse_dir)["reward_evaluations"], 0);

    let compose_dir = dir.path().join("compose");
    ok(&[
        "compose", "--model", "gauss:0,0:1", "--dataset", dataset_a.to_str().unwrap(), "--dataset",
        dataset_b.to_str().unwrap(), "--weights", "0.5,0", "--weights", "0.25,0.25", "--N", "200", "--T", "20", "--seed",
        "5", "--out", compose_dir.to_str().unwrap(),
    ]);
    // A zero weight drops its field, so the first setting is the plain reuse run.
    assert_eq!(
        std::fs::read(reuse_dir.join("samples.csv")).unwrap(),
        std::fs::read(compose_dir.join("samples_0.csv")).unwrap()
    );
    assert!(compose_dir.join("samples_1.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&read(&compose_dir.join("report.json"))).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
    assert_eq!(manifest(&compose_dir)["reward_evaluations"], 0);

    let mismatch = dir.path().join("one_d");
    ok(&[
        "optimize", "--model", "gauss:0:1", "--reward", "linear:1", "--L", "1", "--N", "8", "--T", "5", "--out",
        mismatch.to_str().unwrap(),
    ]);
    let mismatched = dir.path().join("mismatch");
    assert_eq!(
        code(&[
            "compose", "--model", "gauss:0,0:1", "--dataset", dataset_a.to_str().unwrap(), "--dataset",
            mismatch.join("dataset.txt").to_str().unwrap(), "--weights", "1,1", "--out", mismatched.to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn zero_alpha_reuse_samples_the_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    optimize_small(&run, "linear:1,0", "4");
    let reuse_dir = dir.path().join("reuse");
    ok(&[
        "reuse", "--model", "gauss:0,0:1", "--dataset", run.join("dataset.txt").to_str().unwrap(), "--alpha", "0",
        "--N", "2000", "--T", "20", "--out", reuse_dir.to_str().unwrap(),
    ]);
    let samples = read(&reuse_dir.join("samples.csv"));
    for col in 0..2 {
        let m = column_mean(&samples, col);
        assert!(m.abs() < 3.0 / 2000f64.sqrt(), "column {col} mean {m}");
    }
}

#[test]
fn baselines_share_the_metrics_schema_and_feed_gain() {
    let dir = tempfile::tempdir().unwrap();
    let bon = dir.path().join("bon");
    ok(&[
        "baseline", "--method", "bestofn", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--budget", "1600",
        "--T", "10", "--out", bon.to_str().unwrap(),
    ]);
    let metrics = read(&bon.join("metrics.csv"));
    assert!(metrics.starts_with("iter,evals,mean_reward,best_reward,mean_coord_1,mean_coord_2\n"));
    assert_eq!(metrics.lines().count(), 1601);
    assert_eq!(manifest(&bon)["reward_evaluations"], 1600);

    let fk = dir.path().join("fk");
    ok(&[
        "baseline", "--method", "fk", "--model", "gauss:0,0:1", "--reward", "linear:1,0", "--budget", "200", "--T",
        "12", "--out", fk.to_str().unwrap(),
    ]);
    assert_eq!(manifest(&fk)["reward_evaluations"], 192);
    assert_eq!(read(&fk.join("metrics.csv")).lines().count(), 3);

    let run = dir.path().join("run");
    optimize_small(&run, "linear:1,0", "8");
    let out = ok(&[
        "gain", "--ours", run.join("metrics.csv").to_str().unwrap(), "--baseline", bon.join("metrics.csv").to_str().unwrap(),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("best_so_far:") && text.contains("batch_mean:"), "{text}");
}

#[test]
fn demo_with_identical_target_matches_base() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("demo");
    ok(&[
        "demo", "--base", "gauss:0,0:1", "--target", "gauss:0,0:1", "--target", "gauss:2,0:1", "--dataset-size", "64",
        "--N", "200", "--T", "20", "--out", o.to_str().unwrap(),
    ]);
    for name in ["base.csv", "target_0.csv", "target_1.csv", "guided_0.csv", "guided_1.csv", "composite.csv"] {
        assert!(o.join(name).exists(), "{name}");
    }
    let guided = read(&o.join("guided_0.csv"));
    assert!(column_mean(&guided, 0).abs() < 0.35);
    let shifted = read(&o.join("guided_1.csv"));
    assert!(column_mean(&shifted, 0) > 1.0);
}
