use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riskfield::riskmodel::{FittedModel, RiskParams};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_riskfield"))
}

fn course() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/stadium.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every output file except the wall-clock record, by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run_time.json" {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// A full synthetic lap past all four obstacles.
fn lap(tmp: &TempDir, seed: &str) -> PathBuf {
    let out = tmp.path().join(format!("synth_{seed}"));
    let c = course();
    ok(&["synth", "--course", s(&c), "--out", s(&out), "--seed", seed, "--steps", "1100"]);
    out.join("log.csv")
}

#[test]
fn missing_course_is_a_usage_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["synth", "--course", "no/such/course.json", "--out", s(tmp.path()), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/course.json"));
}

#[test]
fn unknown_flag_and_parameter_are_usage_errors() {
    assert_eq!(run(&["sample", "--bogus"]).status.code(), Some(2));
    let tmp = TempDir::new().unwrap();
    let c = course();
    let out = run(&["sweep", "--course", s(&c), "--out", s(tmp.path()), "--param", "Z", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_is_byte_reproducible() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model.json");
    let params = RiskParams::new(0.544, 16.349, 0.01, 1.416, 40.782).unwrap();
    std::fs::write(&model, FittedModel::from_params(params, 1.2).to_json()).unwrap();
    let c = course();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["sample", "--course", s(&c), "--model", s(&model), "--out", s(dir), "--n", "5", "--steps", "30", "--seed", "11"]);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.contains_key("trajectory_004.csv") && sa.contains_key("median.csv"));
    assert_eq!(sa, sb);
}

#[test]
fn fit_writes_one_model_per_obstacle() {
    let tmp = TempDir::new().unwrap();
    let log = lap(&tmp, "5");
    let c = course();
    let out = tmp.path().join("fit");
    ok(&["fit", "--course", s(&c), "--log", s(&log), "--out", s(&out)]);
    let files = snapshot(&out);
    let models: Vec<_> = files.keys().filter(|k| k.starts_with("model_")).collect();
    assert_eq!(models.len(), 4, "{models:?}");
    let quantiles = String::from_utf8(files["quantiles.csv"].clone()).unwrap();
    assert!(quantiles.starts_with("quantile,A,B,C,D,E\n"));
    assert!(files.contains_key("segments.json") && files.contains_key("run_manifest.json"));

    let single = tmp.path().join("single");
    ok(&["fit", "--course", s(&c), "--log", s(&log), "--out", s(&single), "--preview", "1.2"]);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(single.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["previews"], serde_json::json!([1.2]));
    let model: serde_json::Value =
        serde_json::from_slice(&std::fs::read(single.join("model_00_obstacle0.json")).unwrap()).unwrap();
    assert_eq!(model["preview"], 1.2);

    // Held-out evaluation reports every requested horizon as a column.
    let eval = tmp.path().join("eval");
    let model = single.join("model_00_obstacle0.json");
    ok(&[
        "eval", "--course", s(&c), "--model", s(&model), "--log", s(&log), "--out", s(&eval),
        "--seed", "3", "--n", "5", "--horizons", "1,2,5",
    ]);
    let table = std::fs::read_to_string(eval.join("deviation.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "case,1s,2s,5s");
    assert!(table.lines().any(|l| l.starts_with("median,")));
}

#[test]
fn sweep_writes_three_ensembles_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let c = course();
    let out = tmp.path().join("sweep");
    ok(&["sweep", "--course", s(&c), "--out", s(&out), "--param", "A", "--n", "3", "--steps", "20", "--seed", "3"]);
    for level in ["low", "median", "high"] {
        assert!(out.join(level).join("trajectory_002.csv").exists(), "{level}");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(out.join("turn_rate.csv").exists());

    let plot = tmp.path().join("plot");
    let t = out.join("low").join("trajectory_000.csv");
    ok(&["plot", "--course", s(&c), "--out", s(&plot), s(&t)]);
    let svg = std::fs::read_to_string(plot.join("trajectories.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(plot.join("velocity.svg").exists());
}
