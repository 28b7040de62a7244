//! End-to-end tests of the `cacm` binary: exit codes, artifact layout, and
//! replay determinism, driven through real process spawns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cacm() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cacm"));
    // Ambient overrides must not leak into the tests.
    for (name, _) in std::env::vars() {
        if name.starts_with("CACM_") {
            cmd.env_remove(name);
        }
    }
    cmd
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const CAUSAL_SPEC: &str = "attribute color=causal\norientation=causal\ne_xc_edge=false\n";

const TINY_CONFIG: &str = "\
[dataset]
rows_per_env = 120
seed = 3

[model]
steps = 30
batch_per_env = 16
hidden = 12

[penalty]
mode = constraint
";

#[test]
fn derive_prints_selected_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "causal.spec", CAUSAL_SPEC);
    let out = cacm().arg("derive").arg(&spec).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("X_c ⊥ color | Y, E [selected]"), "got: {text}");
    assert!(text.contains("X_c ⊥ E"));
}

#[test]
fn derive_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "causal.spec", CAUSAL_SPEC);
    let out = cacm()
        .arg("derive")
        .arg(&spec)
        .arg("--json")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert!(row.get("subject").is_some());
        assert!(row.get("other").is_some());
        assert!(row["given"].is_array());
        assert!(row["selected"].is_boolean());
    }
    // Round trip: re-serialize and parse back to the same value.
    let text = serde_json::to_string(&rows).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back.as_array().unwrap(), rows);
}

#[test]
fn derive_malformed_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "bad.spec", "attribute color=sideways\n");
    let out = cacm().arg("derive").arg(&spec).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sideways"), "stderr: {}", stderr(&out));
}

#[test]
fn dsep_collider_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let graph = write(
        dir.path(),
        "collider.graph",
        "node A role=attribute observed=true\n\
         node C role=attribute observed=true\n\
         node B role=attribute observed=true\n\
         edge A C\nedge B C\n",
    );
    let out = cacm()
        .args(["dsep"])
        .arg(&graph)
        .args(["--a", "A", "--b", "B"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "d-separated");

    let out = cacm()
        .args(["dsep"])
        .arg(&graph)
        .args(["--a", "A", "--b", "B", "--given", "C"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), "connected");
}

#[test]
fn gen_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.ini", TINY_CONFIG);
    let out_dir = dir.path().join("out");
    let out = cacm()
        .arg("gen")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("dataset.csv")).unwrap();
    assert!(csv.starts_with("env,y,a_cause,"));
    assert_eq!(csv.lines().count(), 1 + 3 * 120);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 1);
    assert!(manifest["versions"]["cacm-core"].is_string());
}

#[test]
fn train_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.ini", TINY_CONFIG);
    for run in ["run1", "run2"] {
        let out = cacm()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    }
    for file in ["summary.csv", "manifest.json"] {
        let a = fs::read(dir.path().join("run1").join(file)).unwrap();
        let b = fs::read(dir.path().join("run2").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between replays");
    }
}

#[test]
fn train_divergence_exits_3_after_writing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.ini", TINY_CONFIG);
    let out_dir = dir.path().join("boom");
    let out = cacm()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--set", "model.weight_decay=1e9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("diverged"));
    assert!(out_dir.join("trials.jsonl").exists());
    assert!(out_dir.join("summary.csv").exists());
}

#[test]
fn report_empty_file_exits_2_with_no_trials() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.jsonl", "");
    let out = cacm()
        .arg("report")
        .arg(&empty)
        .arg("--out")
        .arg(dir.path().join("rep"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no trials"), "stderr: {}", stderr(&out));
}

#[test]
fn report_regenerates_the_sweep_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.ini", TINY_CONFIG);
    let sweep_dir = dir.path().join("sw");
    let out = cacm()
        .arg("sweep")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&sweep_dir)
        .args(["--trials", "2", "--seeds", "0,1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let rep_dir = dir.path().join("rep");
    let out = cacm()
        .arg("report")
        .arg(sweep_dir.join("trials.jsonl"))
        .arg("--out")
        .arg(&rep_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let a = fs::read(sweep_dir.join("sweep_summary.csv")).unwrap();
    let b = fs::read(rep_dir.join("sweep_summary.csv")).unwrap();
    assert_eq!(a, b, "report must reproduce the sweep's own summary");
}

#[test]
fn compare_emits_two_constraint_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.ini", TINY_CONFIG);
    let out_dir = dir.path().join("cmp");
    let out = cacm()
        .arg("compare")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--trials", "1", "--seeds", "0", "--shift", "causal"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per constraint");
    assert!(csv.contains("X_c ⊥ a_cause | Y, E"));
    assert!(csv.contains("X_c ⊥ a_cause | E"));
    let md = fs::read_to_string(out_dir.join("comparison.md")).unwrap();
    assert!(md.contains("### Shift: causal"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cacm()
        .arg("gen")
        .arg("--out")
        .arg(dir.path().join("x"))
        .args(["--set", "dataset.rowz=5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset.rowz"));
}
