use std::path::Path;
use std::process::Command;

fn tubefly(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tubefly")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tubefly(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["tube", "--out", "tube.txt"]);
    assert_eq!(std::fs::read_to_string(d.join("tube.txt")).unwrap().lines().count(), 10);

    ok(d, &["collect", "--task", "t1", "--steps", "20", "--out", "demo.csv"]);
    ok(d, &["augment", "--demo", "demo.csv", "--n", "5", "--out", "data.csv"]);
    let out = ok(d, &["train", "--dataset", "data.csv", "--epochs", "1", "--out", "w.txt"]);
    assert!(out.contains("trained on 126 rows"), "{out}");

    ok(d, &["simulate", "--task", "hover", "--out", "run.csv", "--metrics", "m.csv"]);
    let log = std::fs::read_to_string(d.join("run.csv")).unwrap();
    assert!(log.starts_with("#disturbance_fnv1a="));
    assert_eq!(std::fs::read_to_string(d.join("m.csv")).unwrap().lines().count(), 2);

    ok(d, &["evaluate", "--weights", "w.txt", "--task", "hover", "--out", "e.csv"]);
    ok(d, &["--set", "tube_rollouts=50", "compare", "--tasks", "hover", "--seeds", "2", "--out", "c.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("c.csv")).unwrap().lines().count(), 7);
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!tubefly(d, &["--set", "no_such_key=1", "tube"]).status.success());
    assert!(!tubefly(d, &["--set", "N=0", "tube"]).status.success());
    assert!(!tubefly(d, &["simulate", "--task", "t9"]).status.success());
    assert!(!tubefly(d, &["simulate", "--controller", "policy"]).status.success());
    let out = tubefly(d, &["evaluate", "--weights", "missing.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
