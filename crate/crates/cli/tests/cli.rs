use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dppo_core::curation::read_rollout_log;
use dppo_core::harness::{ComparisonRow, CurveRow};

fn dppo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dppo"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str =
    "seeds = [1, 2, 3, 4, 5]\n\n[suite]\nsamples_per_skill = 30\n\n[loop]\nloops = 2\n";

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[suite]\nsamples_per_skill = 12\n");
    for name in ["a.jsonl", "b.jsonl"] {
        let out = dppo(&["generate", "--config", &cfg, "--out", name], tmp.path());
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = fs::read_to_string(tmp.path().join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read_to_string(tmp.path().join("b.jsonl")).unwrap());
    assert_eq!(a.lines().count(), 1 + 6 * 12);
}

#[test]
fn malformed_key_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[loop]\nrollouts_per_sampel = 8\n");
    let out = dppo(
        &["generate", "--config", &cfg, "--out", "s.jsonl"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rollouts_per_sampel"));

    let cfg = write_config(tmp.path(), "[suite]\nanswers = 1\n");
    let out = dppo(&["run", "--config", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_and_report_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = dppo(&["run", "--config", &cfg, "--out", "runs"], tmp.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mode_dir = tmp.path().join("runs/dppo");
    let histories = (1..=5)
        .filter(|s| mode_dir.join(format!("seed_{s}/history.csv")).exists())
        .count();
    assert_eq!(histories, 5);
    assert!(mode_dir.join("report.csv").exists());
    assert!(!mode_dir.join("seed_1/INCOMPLETE").exists());
    let log = fs::File::open(mode_dir.join("seed_1/rollouts.jsonl")).unwrap();
    assert!(!read_rollout_log(std::io::BufReader::new(log))
        .unwrap()
        .is_empty());

    // only dppo present: the two baselines are reported absent
    let out = dppo(&["report", "--out", "runs"], tmp.path());
    assert!(out.status.success());
    let rows: Vec<ComparisonRow> = csv::Reader::from_path(tmp.path().join("runs/comparison.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].present && !rows[1].present && !rows[2].present);
    let r = &rows[0];
    let retention = r.retention_mean.unwrap();
    assert!(
        (retention - (r.general_after_mean.unwrap() - r.general_before_mean.unwrap())).abs()
            < 1e-12
    );

    let curves: Vec<CurveRow> = csv::Reader::from_path(tmp.path().join("runs/curves.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    for seed in 1..=5 {
        assert_eq!(curves.iter().filter(|c| c.seed == seed).count(), 2 * 2);
    }

    for mode in ["rl_only", "sft_only"] {
        let out = dppo(
            &[
                "run", "--config", &cfg, "--out", "runs", "--mode", mode, "--seeds", "1,2",
            ],
            tmp.path(),
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    dppo(&["report", "--out", "runs"], tmp.path());
    let rows: Vec<ComparisonRow> = csv::Reader::from_path(tmp.path().join("runs/comparison.csv"))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert!(rows.iter().all(|r| r.present));
    assert_eq!(rows[1].seeds, 2);
}

#[test]
fn loops_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = dppo(
        &[
            "run", "--config", &cfg, "--out", "runs", "--seeds", "9", "--loops", "1",
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    let history = fs::read_to_string(tmp.path().join("runs/dppo/seed_9/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2);
    let ckpts = fs::read_dir(tmp.path().join("runs/dppo/seed_9/checkpoints"))
        .unwrap()
        .count();
    assert_eq!(ckpts, 2);
}

#[test]
fn prefcheck_rows_all_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dppo(&["prefcheck", "--out", "runs"], tmp.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = fs::read_to_string(tmp.path().join("runs/prefcheck/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{report}");
}

#[test]
fn aborted_run_leaves_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seeds = [1]\n\n[suite]\nsamples_per_skill = 20\n\n[loop]\nlr_rl = 1e308\n",
    );
    let out = dppo(&["run", "--config", &cfg, "--out", "runs"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RL"));
    assert!(tmp.path().join("runs/dppo/seed_1/INCOMPLETE").exists());

    // a partial run is ignored by the report
    let out = dppo(&["report", "--out", "runs"], tmp.path());
    assert!(out.status.success());
    let text = fs::read_to_string(tmp.path().join("runs/comparison.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("dppo,false"));
}
