use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcm"))
        .args(args)
        .env_remove("LCM_OUT_DIR")
        .output()
        .expect("spawn lcm")
}

fn catalog(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn correct_scenario_exits_zero() {
    let o = lcm(&["run", &catalog("correct.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "correct: no violations, fork-linearizable");
}

#[test]
fn rollback_scenario_reports_detection() {
    let o = lcm(&["run", &catalog("rollback.toml")]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("rollback: DETECTED at op "), "{}", stdout(&o));
}

#[test]
fn whole_catalog_passes() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path().display().to_string())
        .filter(|p| p.ends_with(".toml"))
        .collect();
    files.sort();
    assert!(files.len() >= 10);
    let mut args = vec!["run"];
    args.extend(files.iter().map(String::as_str));
    let o = lcm(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().count(), files.len());
}

#[test]
fn malformed_scenario_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.toml", "name = \"bad\"\n\n[workload]\nclients = \"three\"\n");
    let o = lcm(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn missing_file_exits_two() {
    let o = lcm(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_flag_exits_two() {
    let o = lcm(&["run", &catalog("correct.toml"), "--store-mode", "eventually"]);
    assert_eq!(o.status.code(), Some(2));
    let o = lcm(&["run", &catalog("correct.toml"), "--batch-size", "99"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overrides_apply() {
    let o = lcm(&[
        "run",
        &catalog("correct.toml"),
        "--clients",
        "5",
        "--batch-size",
        "4",
        "--store-mode",
        "async",
        "--seed",
        "9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn traces_written_and_checkable() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lcm"))
        .args(["run", &catalog("fork-join.toml")])
        .env("LCM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let trace = dir.path().join("fork-join.jsonl");
    assert!(trace.exists());
    let c = lcm(&["check", trace.to_str().unwrap()]);
    assert_eq!(c.status.code(), Some(0), "{}", stderr(&c));
    assert!(stdout(&c).contains("DETECTED"));

    let garbage = write(dir.path(), "garbage.jsonl", "{\"seq\": 0}\n");
    assert_eq!(lcm(&["check", garbage.to_str().unwrap()]).status.code(), Some(2));
}

/// An invoke replayed into a sibling fork executes there a second time;
/// nobody raises a violation and the checker has to catch it.
#[test]
fn replay_into_sibling_fork_is_reported_as_undetected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "fork-replay.toml",
        r#"
name = "fork-replay"

[workload]
clients = 3
ops = 60

[[actions]]
at = 26
action = "fork-contexts"
groups = [[1, 2], [3]]

[[actions]]
at = 26
action = "drop-reply"

[[actions]]
at = 27
action = "route"
client = 1
instance = 1

[[actions]]
at = 27
action = "replay"
back = 1
"#,
    );
    let o = lcm(&["run", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.starts_with("fork-replay: no violations; UNDETECTED INCONSISTENCY"), "{out}");
}

#[test]
fn fuzz_small_range() {
    let o = lcm(&["fuzz", "--seed", "0", "--count", "25", "--ops", "40"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("runs 25  detected "));
    let o = lcm(&["fuzz", "--count", "10", "--budget", "0", "--ops", "30"]);
    assert_eq!(stdout(&o).lines().next().unwrap(), "runs 10  detected 0  undetected 0  false alarms 0");
}

#[test]
fn bench_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let o = lcm(&[
        "bench",
        "--modes",
        "baseline-no-lcm,lcm,lcm-batch",
        "--ops",
        "64",
        "--clients",
        "8",
        "--batch-size",
        "8",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("mode,store_mode,ops,seconds,ops_per_sec,relative\n"));
    assert!(dir.path().join("bench.gp").exists());
    assert_eq!(lcm(&["bench", "--modes", "warp"]).status.code(), Some(2));
}
