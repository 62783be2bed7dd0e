use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imaudit::pipeline::fixtures::BoundaryPanel;

fn imaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imaudit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn panel(dir: &Path) -> PathBuf {
    BoundaryPanel::new(2, true).write_to(dir).unwrap()
}

#[test]
fn run_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = panel(dir.path());
    let out = dir.path().join("results");
    let o = imaudit(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "1", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first_ranked = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(first_ranked.contains("D01"), "{first_ranked}");

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), 9);
    for a in artifacts {
        let file = out.join(a["file"].as_str().unwrap());
        assert_eq!(std::fs::metadata(&file).unwrap().len(), a["bytes"].as_u64().unwrap());
        assert_eq!(a["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(manifest["seed"], 2);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = panel(dir.path());
    let out = dir.path().join("r");
    let o = imaudit(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "77", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 77);
}

#[test]
fn stage_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = panel(dir.path());
    let cases: [(&str, &[&str]); 5] = [
        ("interpolate", &["interpolated_counts.csv"]),
        ("audit", &["audit_report.csv", "audit_curves.csv"]),
        ("rates", &["rates.csv"]),
        ("fpca", &["fpca_model.json", "fpca_scores.csv"]),
        ("cluster", &["cluster_assignments.csv", "cluster_indices.csv", "dendrogram.json"]),
    ];
    for (command, files) in cases {
        let out = dir.path().join(command);
        let o = imaudit(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), command]);
        assert!(o.status.success(), "{command}: {}", stderr(&o));
        for f in files {
            let text = std::fs::read_to_string(out.join(f)).unwrap();
            assert!(!text.is_empty(), "{command}/{f}");
        }
    }
    let report = std::fs::read_to_string(dir.path().join("audit/audit_report.csv")).unwrap();
    assert!(report.starts_with("round,rank,district_id,tau_hat,t_max"));
}

#[test]
fn merge_reaudits_without_the_members() {
    let dir = tempfile::tempdir().unwrap();
    let config = panel(dir.path());
    let mut text = std::fs::read_to_string(&config).unwrap();
    text.push_str("\n[[merges]]\nname = \"D01+D02\"\nmembers = [\"D01\", \"D02\"]\n");
    std::fs::write(&config, text).unwrap();
    let out = dir.path().join("m");
    let o = imaudit(&["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "merge"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let merged = std::fs::read_to_string(out.join("merged_counts.csv")).unwrap();
    assert!(merged.contains("D01+D02,1911,"));
    assert!(!merged.contains("\nD01,"));
    let report = std::fs::read_to_string(out.join("audit_report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("2,") && l.contains("D01+D02")));
    assert!(!report.lines().any(|l| l.starts_with("2,") && l.contains(",D01,")));
}

#[test]
fn bad_input_reports_stage_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = panel(dir.path());
    let counts = dir.path().join("counts.csv");
    let mut text = std::fs::read_to_string(&counts).unwrap();
    text.push_str("D01,1911,10,3\n");
    std::fs::write(&counts, text).unwrap();
    let o = imaudit(&["--config", config.to_str().unwrap(), "audit"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("[ingest]") && err.contains("line") && err.contains("duplicate"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let o = imaudit(&["run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"));
    let o = imaudit(&["--config", "/nonexistent/config.toml", "run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));
}

#[test]
fn simulate_emits_csv_and_a_table() {
    let o = imaudit(&[
        "simulate", "--scenario", "4", "--tau", "25,150", "--factor", "0.5,1.5", "--reps", "20",
        "--calibration-reps", "100", "--method", "2", "--seed", "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("scenario,change_factor,tau,method,accuracy_pct,tpr_pct"));
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.starts_with("4,") && l.contains(",2,")));
    assert!(stderr(&o).contains("Acc t=25"));

    let again = imaudit(&[
        "simulate", "--scenario", "4", "--tau", "25,150", "--factor", "0.5,1.5", "--reps", "20",
        "--calibration-reps", "100", "--method", "2", "--seed", "5",
    ]);
    assert_eq!(stdout(&again), csv);
}

#[test]
fn simulate_writes_into_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = imaudit(&[
        "--out", dir.path().to_str().unwrap(), "simulate", "--scenario", "1", "--tau", "25", "--factor", "0.5",
        "--reps", "10", "--calibration-reps", "100",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("simulation_s1_m1.csv").is_file());
    assert!(stdout(&o).contains("TPR t=25"));
}

#[test]
fn simulate_rejects_impossible_change_times() {
    let o = imaudit(&["simulate", "--scenario", "1", "--tau", "250", "--reps", "10"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[simulate]"));
}
