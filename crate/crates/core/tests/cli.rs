//! End-to-end tests of the `suspension-lab` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_suspension-lab"))
        .args(args)
        .env_clear()
        .output()
        .expect("binary runs")
}

fn run(config: &Path, out: &Path) -> Output {
    lab(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn list_names_every_experiment() {
    let out = lab(&["--list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["lemma-simple", "lemma-general", "stage-dbar", "entropy-growth", "krengel-zero", "poisson-approx"] {
        assert!(text.contains(name), "missing {name}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "e.cfg",
        "experiment = entropy-growth\nseed = 99\nwindow = 40000\nreplicates = 10000\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a).status.success());
    assert!(run(&cfg, &b).status.success());
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 2);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn summary_echoes_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "p.cfg", "experiment = poisson-approx\nseed = 5\ncases = 30\n");
    let out = dir.path().join("out");
    assert!(run(&cfg, &out).status.success());
    let s: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["experiment"], "poisson-approx");
    assert_eq!(s["seed"], 5);
    assert_eq!(s["config"]["cases"], "30");
    assert_eq!(s["inputs"]["n_max"], 200);
    assert_eq!(s["passed"], true);
    let csv = std::fs::read_to_string(out.join("lecam.csv")).unwrap();
    assert!(csv.starts_with("case,n,lambda,exact_l1,bound,within_bound\n"));
}

#[test]
fn failed_assertions_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "k.cfg",
        "experiment = krengel-zero\nseed = 1\norbit = 4096\nL_list = 1,2\nratio_max = 0.01\n",
    );
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["experiment"], "krengel-zero");
    let failures = report["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["passed"], false);
}

#[test]
fn bad_configs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("noseed.cfg", "experiment = poisson-approx\n"),
        ("unknown.cfg", "experiment = poisson-approx\nseed = 1\nwindow = 3\n"),
        ("kind.cfg", "experiment = nope\nseed = 1\n"),
        ("zero.cfg", "experiment = poisson-approx\nseed = 1\ncases = 0\n"),
        ("schedule.cfg", "experiment = lemma-general\nseed = 1\nM.1 = 3\nk.1 = 2\nM.2 = 3\nk.2 = 2\n"),
    ] {
        let cfg = write(dir.path(), name, text);
        let out = run(&cfg, &dir.path().join("out"));
        assert_eq!(out.status.code(), Some(2), "{name}");
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(report["error"].as_str().unwrap().contains("error"), "{name}: {report}");
    }
    let missing = run(&dir.path().join("absent.cfg"), &dir.path().join("out"));
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        suspension_lab::config::ExperimentConfig::from_file(&path).unwrap();
        seen += 1;
    }
    assert_eq!(seen, 6);
}
