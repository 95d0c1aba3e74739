//! Command-line contract: exit codes by error class, flag overrides, and
//! panel reuse between subcommands.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_paneldd"))
}

fn fixtures_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/config.toml")
}

#[test]
fn missing_config_exits_2() {
    let out = bin()
        .args(["ingest", "-c", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[study]\nstart = \"2019-01-01\"\nend = \"2019-12-31\"\nnot_a_key = 1\n[inputs]\nmode = \"synth\"\n[output]\ndir = \"o\"\n").unwrap();
    let out = bin().args(["ingest", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not_a_key"), "{err}");
}

#[test]
fn malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["victims.csv", "school_status.csv", "epi.csv", "quarantine.csv"] {
        std::fs::write(dir.path().join(f), "municipality,week_start\n").unwrap();
    }
    // population with a duplicate key -> data error
    std::fs::write(
        dir.path().join("population.csv"),
        "municipality,year,age,sex,count\n101,2019,5,f,100\n101,2019,5,f,100\n",
    )
    .unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        r#"
[study]
start = "2019-01-01"
end = "2019-12-31"
closure_date = "2019-06-03"

[inputs]
mode = "raw"
records = "victims.csv"
population = "population.csv"
school_status = "school_status.csv"
epi = "epi.csv"
quarantine = "quarantine.csv"

[output]
dir = "out"
"#,
    )
    .unwrap();
    let out = bin().args(["ingest", "-c"]).arg(&cfg).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn seed_flag_overrides_file_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    // ingest first so the bootstrap command has a panel
    let st = bin()
        .args(["ingest", "-c"])
        .arg(fixtures_config())
        .arg("--output-dir")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let st = bin()
        .args(["bootstrap", "-c"])
        .arg(fixtures_config())
        .arg("--output-dir")
        .arg(&out_dir)
        .args(["--seed", "777", "--bootstrap-b", "8"])
        .status()
        .unwrap();
    assert!(st.success());

    let manifest = std::fs::read_to_string(out_dir.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("bootstrap.seed=777"), "{manifest}");
    assert!(manifest.contains("bootstrap.b=8"));
    let results = std::fs::read_to_string(out_dir.join("bootstrap_results.csv")).unwrap();
    let row = results.lines().nth(2).unwrap();
    assert!(row.ends_with(",8,777"), "{row}");
}

#[test]
fn synth_mode_runs_from_generated_panel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        r#"
[study]
start = "2019-01-01"
end = "2021-12-31"
categories = ["outcome"]
smoothing_categories = []

[inputs]
mode = "synth"

[inputs.synth]
n_municipalities = 10
n_weeks = 157
closure_week = 63
adoption = { kind = "staggered", earliest = 85, latest = 130, never_fraction = 0.0 }
effect_closure = -1.5
effect_reopen = -0.8
effect_attendance = 0.0
effect_event = 0.0
cohort_effects = []
continuous_effect = false
baseline_rate = 30.0
municipal_fe_scale = 3.0
woy_amplitude = 2.0
trend_degree = 0
trend_linear = 0.0
trend_quadratic = 0.0
noise_scale = 1.0
ar1 = 0.4
population_range = [20000, 120000]
with_covariates = true
categories = ["outcome"]
seed = 7

[estimate]
run_attendance = false
run_subclasses = false

[counterfactual]
window_starts = ["2019-01-01"]
bootstrap_intervals = false

[bootstrap]
b = 8

[output]
dir = "out"
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["synth", "-c"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("panel.csv").exists());
    assert!(out_dir.join("synth_truth.json").exists());

    // the canonical panel feeds estimation unchanged
    let st = bin()
        .args(["estimate", "-c"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out_dir.join("table1_results.csv").exists());
}
