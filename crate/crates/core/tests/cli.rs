use std::process::{Command, Output};

fn anoncount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anoncount")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_the_count() {
    let o = anoncount(&["run", "--n", "5", "--scheduler", "random-connected", "--seed", "7", "--mode", "basic"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "output 5"));
}

#[test]
fn zero_processes_is_a_usage_error() {
    let o = anoncount(&["run", "--n", "0", "--scheduler", "star"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_scheduler_is_an_error() {
    let o = anoncount(&["run", "--n", "3", "--scheduler", "hypercube"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn failing_checks_exit_nonzero() {
    let o = anoncount(&["run", "--n", "4", "--scheduler", "ring", "--budget", "2000"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn verify_small_suite() {
    let o = anoncount(&["verify", "--max-n", "4", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 unsound"));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    let o =
        anoncount(&["sweep", "--n-max", "3", "--seeds", "2", "--scheduler", "star", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn trace_dump_load_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.trace");
    let p = path.to_str().unwrap();
    let o = anoncount(&["run", "--n", "4", "--scheduler", "t-union", "--t", "2", "--trace-out", p]);
    assert!(o.status.success());
    let loaded = anoncount(&["trace", "load", p]);
    assert!(loaded.status.success());
    assert!(stdout(&loaded).contains("t-union-connected true"));
    let replay = anoncount(&["run", "--n", "4", "--scheduler", &format!("replay:{p}")]);
    assert!(replay.status.success());
    assert_eq!(stdout(&replay), stdout(&o));

    let dumped = anoncount(&["trace", "dump", "--n", "3", "--scheduler", "path", "--rounds", "2"]);
    assert_eq!(stdout(&dumped), "n 3 T 1\nround 1\n0 1 1\n1 2 1\nround 2\n0 1 1\n1 2 1\n");
}
