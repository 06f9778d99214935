use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn curate(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate"))
        .arg("--config")
        .arg(fixture("tiny.toml"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_upstream_artifact_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = curate(dir.path(), &["fit-gmm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-ssl"), "{}", stderr(&o));
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_clusters = 0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_curate"))
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "gen-synth",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = Command::new(env!("CARGO_BIN_EXE_curate"))
        .arg("no-such-stage")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = curate(&blocker, &["gen-synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn stages_run_in_order_and_rerun_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    for stage in [
        "gen-synth",
        "train-ssl",
        "fit-gmm",
        "score",
        "plan",
        "train-semisl",
        "eval",
    ] {
        let o = curate(dir.path(), &[stage]);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
        assert!(stdout(&o).contains("done"));
    }
    let manifest = fs::read(dir.path().join("manifest.json")).unwrap();
    let o = curate(dir.path(), &["score"]);
    assert!(stdout(&o).contains("up to date"));
    assert_eq!(
        fs::read(dir.path().join("manifest.json")).unwrap(),
        manifest
    );

    let o = curate(dir.path(), &["--seed", "8", "gen-synth"]);
    assert!(stdout(&o).contains("done"));
}

#[test]
fn score_stage_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["gen-synth", "train-ssl", "fit-gmm", "score"] {
        assert_eq!(curate(dir.path(), &[stage]).status.code(), Some(0));
    }
    for name in ["scores.csv", "scores_cis.json"] {
        let got = fs::read_to_string(dir.path().join(name)).unwrap();
        let want = fs::read_to_string(fixture(&format!("golden_{name}"))).unwrap();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn csv_format_and_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = curate(d, &["--format", "csv", "run-all"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert!(a.path().join("data.csv").exists());
    for name in [
        "report.json",
        "accuracy.csv",
        "auroc.csv",
        "purity.csv",
        "groups.csv",
        "plan.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn sweep_writes_summary_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = curate(dir.path(), &["sweep"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2 * 2);
    let by_k = fs::read_to_string(dir.path().join("sweep_n_clusters.csv")).unwrap();
    assert!(by_k.lines().any(|l| l.starts_with("3,ood_weighted")));
    assert!(by_k.lines().any(|l| l.starts_with("4,uniform")));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = curate(dir.path(), &["--seed", "11", "show-config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed = 11"));
    let cfg = dir.path().join("echo.toml");
    fs::write(&cfg, &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_curate"))
        .args(["--config", cfg.to_str().unwrap(), "show-config"])
        .output()
        .unwrap();
    assert_eq!(stdout(&again), text);
}
