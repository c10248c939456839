use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn emad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn metric(out_dir: &Path, name: &str) -> f64 {
    let text = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{name},")))
        .unwrap_or_else(|| panic!("metric {name} missing in\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = emad(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = emad(&["score-report", "--patient", "p0001"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = emad(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = emad(&["gradcheck", "--config", "missing.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), r#"{"grpo": {"group_size": 1}}"#).unwrap();
    let o = emad(&["gradcheck", "--config", "bad.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    fs::write(dir.path().join("unknown.json"), r#"{"nonsense": true}"#).unwrap();
    let o = emad(&["gradcheck", "--config", "unknown.json", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = emad(&["eval-grounding", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
}

#[test]
fn gradcheck_passes_and_records_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = emad(&["gradcheck", "--seeds", "10", "--out", "g"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("g");
    assert!(out.join("gradcheck.csv").exists());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gradcheck");
    assert!(run["outputs"]["metrics.csv"].is_string());
}

#[test]
fn gold_report_scores_the_configured_maximum() {
    let dir = tempfile::tempdir().unwrap();
    let o = emad(&["generate-cohort", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(metric(&dir.path().join("o"), "n_train"), 70.0);
    fs::copy(dir.path().join("o/cohort/reports/p0001.txt"), dir.path().join("gold.txt")).unwrap();
    fs::write(
        dir.path().join("rules.json"),
        r#"{"weights": {"format": 1.0, "nia": 2.0, "consistency": 0.5}}"#,
    )
    .unwrap();
    let o = emad(
        &["score-report", "--report", "gold.txt", "--patient", "p0001", "--config", "rules.json", "--out", "o"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let b: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(b["total"].as_f64().unwrap(), 3.5);
    let o = emad(
        &["score-report", "--report", "gold.txt", "--patient", "nobody", "--out", "o"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn rerunning_from_run_json_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"grpo": {"iters": 20}}"#).unwrap();
    let o = emad(&["train-grpo", "--config", "c.json", "--seed", "7", "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(first["config"]["seed"], 7);
    assert_eq!(first["config"]["grpo"]["seed"], 12);
    fs::copy(dir.path().join("a/run.json"), dir.path().join("again.json")).unwrap();
    let o = emad(&["train-grpo", "--config", "again.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let second: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(first["outputs"], second["outputs"]);
    let o = emad(&["eval-consistency", "--policy", "a/checkpoints/policy", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(metric(&dir.path().join("e"), "reports"), 20.0);
    let o = emad(&["eval-consistency", "--out", "g"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(metric(&dir.path().join("g"), "accuracy"), 1.0);
}
