use std::path::Path;
use std::process::{Command, Output};

fn prefnash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prefnash"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "problem = \"synthetic-quadratic\"\n[schedule]\nk_max = 5\n[learning]\nm0 = 10\n";

#[test]
fn lists_builtin_problems() {
    let out = prefnash(&["list-problems"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for id in ["synthetic-quadratic", "lqr-game", "quadratic-file", "picheny-4.1", "facchinei-A3", "pavel-ex1"] {
        assert!(text.contains(id), "{id} missing from\n{text}");
    }
}

#[test]
fn run_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run_dir = dir.path().join("out");
    let out = prefnash(&["run", &cfg, "--seed", "4", "--out", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["iterations.csv", "plot.csv", "theta.json", "config.toml", "summary.txt"] {
        assert!(run_dir.join(f).exists(), "{f} not written");
    }
    let snapshot = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 4"));

    let out = prefnash(&["evaluate", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ref_error = ") && text.contains("stored_gap = "), "{text}");
}

#[test]
fn repeat_writes_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let root = dir.path().join("rep");
    let out = prefnash(&["run", &cfg, "--seed", "7", "--repeat", "2", "--out", root.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("seed-7/iterations.csv").exists());
    assert!(root.join("seed-8/iterations.csv").exists());
    assert!(root.join("aggregate.txt").exists());
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let csv: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let d = dir.path().join(name);
            assert!(prefnash(&["run", &cfg, "--out", d.to_str().unwrap()]).status.success());
            std::fs::read(d.join("iterations.csv")).unwrap()
        })
        .collect();
    assert_eq!(csv[0], csv[1]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prefnash(&["--help"]).status.code(), Some(0));
    assert_eq!(prefnash(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(prefnash(&["run", "/nonexistent/run.toml"]).status.code(), Some(1));

    let bad = write_config(dir.path(), "problem = \"synthetic-quadratic\"\n[schedule]\ndelta = -1.0\n");
    let out = prefnash(&["run", &bad, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));

    let stub = write_config(dir.path(), "problem = \"pavel-ex1\"\n");
    assert_eq!(prefnash(&["run", &stub, "--out", dir.path().join("y").to_str().unwrap()]).status.code(), Some(1));

    // an empty directory has no stored run
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(prefnash(&["evaluate", empty.to_str().unwrap()]).status.code(), Some(2));
}
