use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eat(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eat"))
        .env("RUST_LOG", "warn")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(eat(&a, &["--seed", "3", "gen-data"]).status.success());
    assert!(eat(&b, &["--seed", "3", "gen-data"]).status.success());
    assert!(eat(&c, &["--seed", "4", "gen-data"]).status.success());
    let read = |d: &Path| fs::read_to_string(d.join("dev.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(a.join("train.jsonl").exists());
}

#[test]
fn cost_writes_the_analytic_table() {
    let dir = tempfile::tempdir().unwrap();
    let run = eat(dir.path(), &["cost", "--analytic", "--lengths", "16,64,256"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let text = fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("T,dense_cost,eat_cost,ratio"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = eat(dir.path(), &["eval"]);
    assert!(!missing.status.success());
    assert!(!missing.stderr.is_empty());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": {"window": 7}}"#).unwrap();
    let invalid = eat(dir.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert!(!invalid.status.success());
    assert!(String::from_utf8_lossy(&invalid.stderr).contains("window"));

    let unknown = eat(dir.path(), &["ablate", "--variants", "bogus"]);
    assert!(!unknown.status.success());
}
