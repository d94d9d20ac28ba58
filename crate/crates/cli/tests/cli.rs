use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const ENV: [&str; 8] = ["--task", "chase", "--grid", "4", "--scale", "2", "--frame-stack", "2"];
const TINY: [&str; 10] = ["--epochs", "2", "--d", "16", "--batch-size", "4", "--tdr-batch", "8", "--layers", "1"];

fn stg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("STG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = stg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = stg(args, cwd);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(args: Vec<String>, cwd: &Path) -> String {
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>(), cwd)
}

fn tiny_data(cwd: &Path, out: &str, seed: &str) -> PathBuf {
    run(with(&["gen-data", "--traj", "4", "--seed", seed, "--out", out], &ENV), cwd);
    cwd.join(out)
}

fn tiny_bundle(cwd: &Path, data: &str, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = with(&["pretrain", "--data", data, "--seed", "0", "--out", out], &TINY);
    args.extend(extra.iter().map(|s| s.to_string()));
    run(args, cwd);
    cwd.join(out)
}

#[test]
fn gen_data_writes_requested_trajectories_deterministically() {
    let t = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--task", "chase", "--grid", "8", "--traj", "50", "--seed", "1", "--out"];
    ok(&[&args[..], &["a"]].concat(), t.path());
    ok(&[&args[..], &["b"]].concat(), t.path());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("a/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["trajectory_count"], 50);
    let (ma, mb) = (manifest(&t.path().join("a")), manifest(&t.path().join("b")));
    assert_eq!(ma["status"], "succeeded");
    assert_eq!(ma["outputs"], mb["outputs"]);
    for entry in ma["outputs"].as_array().unwrap() {
        let p = entry["path"].as_str().unwrap();
        assert_eq!(
            std::fs::read(t.path().join("a").join(p)).unwrap(),
            std::fs::read(t.path().join("b").join(p)).unwrap()
        );
    }
}

#[test]
fn argument_errors_exit_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&["gen-data", "--traj", "0", "--seed", "1", "--out", "x"], t.path()).0, 1);
    let (c, err) = code(&["gen-data", "--traj", "3", "--out", "x"], t.path());
    assert_eq!(c, 1);
    assert!(err.contains("--seed"));
    assert_eq!(code(&["no-such-command"], t.path()).0, 1);
    assert_eq!(code(&["gradcheck"], t.path()).0, 1);
    let (c, err) = code(&["gen-data", "--traj", "3", "--seed", "1"], t.path());
    assert_eq!(c, 1);
    assert!(err.contains("STG_DATA_DIR"));
    assert_eq!(code(&["--help"], t.path()).0, 0);
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path(), "d", "1");
    let args = with(&["gen-data", "--traj", "4", "--seed", "2", "--out", "d"], &ENV);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let (c, err) = code(&args, t.path());
    assert_eq!(c, 1);
    assert!(err.contains("--force"));
    ok(&[&args[..], &["--force"]].concat(), t.path());
    assert_eq!(manifest(&t.path().join("d"))["seed"], 2);
    let files = std::fs::read_dir(t.path().join("d")).unwrap();
    let manifests = files.filter(|e| e.as_ref().unwrap().file_name() == "run_manifest.json").count();
    assert_eq!(manifests, 1);
}

#[test]
fn data_dir_env_sets_default_output() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stg"))
        .args(with(&["gen-data", "--traj", "2", "--seed", "7"], &ENV))
        .env("STG_DATA_DIR", t.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(t.path().join("gen-data/seed-7/meta.json").exists());
}

#[test]
fn pretrain_defaults_config_file_and_inputs_untouched() {
    let t = tempfile::tempdir().unwrap();
    let data = tiny_data(t.path(), "d", "1");
    let before = manifest(&data)["outputs"].clone();
    std::fs::write(t.path().join("cfg.json"), r#"{"epochs": 1, "kappa": 0.2, "d": 8}"#).unwrap();
    let mut args = with(&["--config", "cfg.json", "pretrain", "--data", "d", "--seed", "3", "--out", "p"], &TINY);
    // Flag beats file for epochs; file value survives for kappa.
    args.retain(|a| a != "--d" && a != "16");
    run(args, t.path());
    let m = manifest(&t.path().join("p"));
    let cfg = &m["config"];
    assert_eq!(cfg["epochs"], 2);
    assert_eq!(cfg["kappa"], 0.2);
    assert_eq!(cfg["d"], 8);
    assert_eq!(cfg["alpha"], 0.5);
    assert_eq!(cfg["beta"], 0.3);
    assert!(t.path().join("p/bundle.stgc").exists());
    assert!(t.path().join("p/losses.csv").exists());
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);

    // Defaults without any config file.
    let p2 = tiny_bundle(t.path(), "d", "p2", &[]);
    assert_eq!(manifest(&p2)["config"]["kappa"], 0.1);

    assert_eq!(manifest(&data)["outputs"], before);
    let plotted = ok(&["plot", "--curves", "p/losses.csv", "--out", "pl"], t.path());
    assert!(plotted.contains("L_dis.png"));
    // Pretraining hashed exactly the dataset it read.
    assert_eq!(manifest(&t.path().join("p"))["input_hash"], manifest(&p2)["input_hash"]);
}

#[test]
fn multitask_and_geometry_checks() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path(), "d1", "1");
    tiny_data(t.path(), "d2", "2");
    let args = with(&["pretrain", "--data", "d1", "--data", "d2", "--seed", "0", "--out", "m"], &TINY);
    run(args, t.path());
    let m = manifest(&t.path().join("m"));
    assert_eq!(m["config"]["datasets"].as_array().unwrap().len(), 2);

    run(
        vec!["gen-data", "--grid", "5", "--scale", "2", "--frame-stack", "2", "--traj", "2", "--seed", "1", "--out", "d5"]
            .into_iter()
            .map(String::from)
            .collect(),
        t.path(),
    );
    let args = with(&["pretrain", "--data", "d1", "--data", "d5", "--seed", "0", "--out", "x"], &TINY);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let (c, err) = code(&args, t.path());
    assert_eq!(c, 2);
    assert!(err.contains("geometry mismatch"), "{err}");
}

#[test]
fn train_eval_pipeline_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path(), "d", "1");
    tiny_bundle(t.path(), "d", "p", &[]);

    let base = with(
        &["train", "--bundle", "p", "--seed", "4", "--steps", "256", "--rollout", "128", "--minibatch", "64"],
        &ENV,
    );
    let prog: Vec<String> = base.iter().cloned().chain(["--mode", "with-progression", "--out", "x"].map(String::from)).collect();
    let (c, err) = code(&prog.iter().map(String::as_str).collect::<Vec<_>>(), t.path());
    assert_eq!(c, 1);
    assert!(err.contains("--nu"));

    for (out, mode) in [("t1", "stg"), ("t2", "stg"), ("g", "guide-only"), ("w", "with-progression")] {
        let mut a = base.clone();
        a.extend(["--mode", mode, "--eta", "1.0", "--out", out].map(String::from));
        if mode == "with-progression" {
            a.extend(["--nu", "0.5"].map(String::from));
        }
        run(a, t.path());
        assert!(t.path().join(out).join("policy.stgc").exists());
        assert!(t.path().join(out).join("curve.csv").exists());
    }
    let (m1, m2) = (manifest(&t.path().join("t1")), manifest(&t.path().join("t2")));
    assert_eq!(m1["outputs"], m2["outputs"]);
    assert_eq!(manifest(&t.path().join("g"))["config"]["rl"]["reward"]["kind"], "guide_only");

    let eval = with(&["eval", "--policy", "t1", "--episodes", "100", "--seed", "0", "--out", "e"], &ENV);
    run(eval, t.path());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 100);
    assert_eq!(report["report"]["successes"].as_array().unwrap().len(), 100);

    // A policy trained on 8x8 frames cannot be evaluated on another geometry.
    let (c, _) = code(&["eval", "--policy", "t1", "--seed", "0", "--grid", "6"], t.path());
    assert_eq!(c, 2);

    // The bundle must come from the requested environment.
    let (c, err) = code(&["train", "--bundle", "p", "--seed", "0", "--grid", "5", "--scale", "2", "--frame-stack", "2", "--out", "z"], t.path());
    assert_eq!(c, 2, "{err}");
}

#[test]
fn baselines_and_missing_artifacts() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["eval", "--baseline", "expert", "--episodes", "20", "--seed", "0"], t.path());
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["success_rate"], 1.0);
    assert_eq!(code(&["eval", "--policy", "missing", "--seed", "0"], t.path()).0, 2);
    assert_eq!(code(&["eval", "--seed", "0"], t.path()).0, 1);
    assert_eq!(code(&["analyze", "--bundle", "nope", "--data", "nope", "--seed", "0", "--out", "a"], t.path()).0, 2);
    std::fs::write(t.path().join("empty.csv"), "step,loss\n").unwrap();
    let (c, err) = code(&["plot", "--curves", "empty.csv", "--out", "pl"], t.path());
    assert_eq!(c, 2);
    assert!(err.contains("no data"), "{err}");
    std::fs::write(t.path().join("bad.csv"), "step,loss\n0,1\n1,x\n").unwrap();
    let (c, err) = code(&["plot", "--curves", "bad.csv", "--out", "pl2", "--force"], t.path());
    assert_eq!(c, 2);
    assert!(err.contains(":3:"), "{err}");
}

#[test]
fn analyze_compares_bundles() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path(), "d", "1");
    tiny_bundle(t.path(), "d", "a", &[]);
    tiny_bundle(t.path(), "d", "b", &["--kappa", "0"]);
    ok(
        &["analyze", "--continuity", "--bundle", "a", "--bundle", "b", "--data", "d", "--seed", "0", "--out", "r"],
        t.path(),
    );
    let c: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("r/continuity.json")).unwrap()).unwrap();
    assert_eq!(c.as_array().unwrap().len(), 2);
    assert!(c[0]["report"]["ratio"].as_f64().unwrap() > 0.0);
    assert!(!t.path().join("r/histogram_0.json").exists());

    ok(&["analyze", "--bundle", "a", "--data", "d", "--seed", "0", "--out", "all"], t.path());
    for f in ["continuity.json", "histogram_0.json", "histogram_0.csv", "projection_0.csv"] {
        assert!(t.path().join("all").join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_passes_at_f64() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--f64", "--max-elements", "2", "--out", "g"], t.path());
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{out}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(t.path().join("g/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(v["losses"].as_array().unwrap().len(), 6);
    assert_eq!(manifest(&t.path().join("g"))["status"], "succeeded");
}

#[test]
fn numerical_failure_exits_three() {
    let t = tempfile::tempdir().unwrap();
    tiny_data(t.path(), "d", "1");
    let args = with(
        &["pretrain", "--data", "d", "--seed", "0", "--out", "p", "--generator-lr", "1e300", "--critic-lr", "1e300"],
        &TINY,
    );
    let (c, err) = code(&args.iter().map(String::as_str).collect::<Vec<_>>(), t.path());
    assert_eq!(c, 3, "{err}");
    assert_eq!(manifest(&t.path().join("p"))["status"], "failed");
}
