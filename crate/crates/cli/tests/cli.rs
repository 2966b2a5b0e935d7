use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn forgetbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forgetbench"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_setting_writes_reports_and_report_re_renders_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = forgetbench(&["--config", path(&cfg), "--out", path(dir.path()), "--seed", "3", "run-setting"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("d1-d2,d1->d2,knrm,") && r.contains(",3,map@100,") && r.ends_with(",ok")));
    for f in ["summary.txt", "matrices.csv", "timing.csv", "config.toml"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(dir.path().join("runs/d1-d2/knrm/seed3/ewc/R2_1.neural.run").is_file());
    assert!(dir.path().join("logs/d1-d2/knrm/seed3/oracle_d1.csv").is_file());

    let before = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    fs::remove_file(dir.path().join("summary.txt")).unwrap();
    let out = forgetbench(&["--out", path(dir.path()), "report"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("summary.txt")).unwrap(), before);
    assert_eq!(String::from_utf8_lossy(&out.stdout), before);
}

#[test]
fn single_strategy_and_model_narrow_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = forgetbench(&[
        "--config", path(&cfg), "--out", path(dir.path()),
        "run-setting", "--setting", "d1-d2", "--model", "knrm", "--strategy", "ewc",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].contains(",ewc,"));
}

#[test]
fn failing_stage_gives_nonzero_exit_and_a_failure_row() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(smoke_config())
        .unwrap()
        .replace("kind = \"synthetic\"", "kind = \"random\"");
    let broken = format!(
        "{text}\n[[datasets]]\nname = \"ghost\"\nsource = \"dir\"\npath = \"does-not-exist\"\n\n[[settings]]\nname = \"broken\"\ndatasets = [\"d1\", \"ghost\"]\n"
    );
    let cfg = dir.path().join("broken.toml");
    fs::write(&cfg, broken).unwrap();
    let out = forgetbench(&["--config", path(&cfg), "--out", path(dir.path()), "run-setting"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken"));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("broken,")).count(), 2);
    assert_eq!(csv.lines().filter(|l| l.ends_with(",ok")).count(), 2);

    let out = forgetbench(&["--out", path(dir.path()), "report"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_evaluates_a_run_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("x.run");
    let qrels = dir.path().join("x.qrels");
    fs::write(&run, "q1 Q0 a 1 3.0 t\nq1 Q0 b 2 2.0 t\nq1 Q0 c 3 1.0 t\nq2 Q0 z 1 1.0 t\n").unwrap();
    fs::write(&qrels, "q1 0 a 1\nq1 0 c 2\nq2 0 y 1\nq3 0 w 1\n").unwrap();
    let out = forgetbench(&["metrics", "--run", path(&run), "--qrels", path(&qrels), "--metric", "map@100", "--per-query"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    // q1: (1/1 + 2/3) / 2; q2: 0; q3 is not in the run
    let ap1 = (1.0 + 2.0 / 3.0) / 2.0;
    assert!(stdout.contains(&format!("map@100\tq1\t{ap1:.6}")));
    assert!(stdout.contains("map@100\tq2\t0.000000"));
    assert!(!stdout.contains("\tq3\t"));
    assert!(stdout.contains(&format!("map@100\tall\t{:.6}", ap1 / 2.0)));

    let out = forgetbench(&["metrics", "--run", path(&run), "--qrels", path(&qrels), "--metric", "map@100", "--complete"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains(&format!("map@100\tall\t{:.6}", ap1 / 3.0)));
}

#[test]
fn index_writes_statistics_and_trec_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = forgetbench(&["--config", path(&cfg), "--out", path(dir.path()), "index", "--dataset", "d2", "--export"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let base = dir.path().join("index/d2/seed7");
    let stats = fs::read_to_string(base.join("stats.csv")).unwrap();
    assert!(stats.contains("documents,300\n"));
    for f in ["bm25.run", "trec/docs.tsv", "trec/queries.tsv", "trec/qrels.txt"] {
        assert!(base.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn train_oracle_saves_parameters_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = forgetbench(&["--config", path(&cfg), "--out", path(dir.path()), "train-oracle", "--dataset", "d1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let base = dir.path().join("oracles/knrm_d1/seed7");
    for f in ["model.params", "log.csv", "test.combined.run", "test.neural.run"] {
        assert!(base.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn run_rq2_writes_the_regression_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let out = forgetbench(&["--config", path(&cfg), "--out", path(dir.path()), "run-rq2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let features = fs::read_to_string(dir.path().join("rq2/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 17);
    assert!(dir.path().join("rq2/regression.csv").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Relevance density"));
}

#[test]
fn usage_errors_exit_with_two() {
    let out = forgetbench(&["run-setting"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    let cfg = smoke_config();
    let out = forgetbench(&["--config", path(&cfg), "run-setting", "--setting", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
