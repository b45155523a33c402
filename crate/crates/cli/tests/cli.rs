use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hfsem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfsem")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_estimate_converges() {
    let dir = tempfile::tempdir().unwrap();
    let out = hfsem(&["simulate", "--config", "builtin:sec5_system", "--n", "10000", "--h", "0.001", "--seed", "11", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().join("path.csv");
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 10_002);

    let out = hfsem(&["estimate", "--config", "builtin:sec5_2_model", "--path", s(&path), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["diagnostics"]["converged"], true);
    let l = fit["theta"]["lx1[2,1]"].as_f64().unwrap();
    assert!((l - 2.0).abs() < 0.15, "{l}");
    assert!(fit["se"]["see[2,2]"].as_f64().unwrap() > 0.0);

    let out = hfsem(&["gof", "--config", "builtin:sec5_2_model", "--path", s(&path)]);
    assert!(out.status.success());
    let gof: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(gof["test"]["df"], 6);

    let out = hfsem(&["sparse", "--config", "builtin:sec5_2_model", "--path", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(sp["test"]["kind"], "penalized");
}

#[test]
fn simulate_is_seed_deterministic() {
    let run = |seed: &str| hfsem(&["simulate", "--config", "builtin:sec5_system", "--n", "200", "--h", "0.001", "--seed", seed]).stdout;
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn mc_output_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "4")] {
        let out = hfsem(&[
            "mc", "--config", "builtin:sec6_experiment", "--reps", "6", "--seed", "42", "--threads", threads, "--out",
            s(dir.path()),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["summary.csv", "tests.csv", "qq.csv", "run.json"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between thread counts");
    }
}

#[test]
fn mc_single_replication_writes_one_row_per_test() {
    let dir = tempfile::tempdir().unwrap();
    let out = hfsem(&["mc", "--config", "builtin:sec5_experiment", "--reps", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tests = fs::read_to_string(dir.path().join("tests.csv")).unwrap();
    // header + one plain test for each of the three models
    assert_eq!(tests.lines().count(), 4);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("sec5_3a.T,")));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["replications"], 1);
}

#[test]
fn exit_codes() {
    assert_eq!(hfsem(&["mc", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(hfsem(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hfsem(&["mc", "--config", "builtin:missing", "--out", "x"]).status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ \"name\": 3 ").unwrap();
    assert_eq!(hfsem(&["mc", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(3));
    assert_eq!(hfsem(&["mc", "--config", "builtin:sec5_experiment", "--alpha", "1.5", "--out", "x"]).status.code(), Some(3));

    let path = dir.path().join("short.csv");
    fs::write(&path, "t,x1\n0,1\n").unwrap();
    let code = hfsem(&["estimate", "--config", "builtin:sec5_2_model", "--path", s(&path)]).status.code();
    assert_eq!(code, Some(3));
}
