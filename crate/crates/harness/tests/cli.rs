use std::path::Path;
use std::process::{Command, Output};

use route_lab::conditions::conditions;
use route_lab::config::{ExperimentConfig, ExperimentId};
use route_lab::runner::{run_condition, run_experiment};
use route_lab::store::{read_metrics_csv, ResultStore};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_route-lab"))
        .args(args)
        .env("ROUTE_LAB_OUT", out)
        .output()
        .expect("binary runs")
}

fn tiny(exp: ExperimentId) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(exp);
    cfg.seeds = vec![0, 1];
    cfg.epochs = 4;
    cfg.window = 2;
    cfg.batch_size = 16;
    cfg.eval_size = 32;
    cfg.lm_eval_batches = 1;
    cfg
}

#[test]
fn run_then_report_gives_four_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--exp", "table4", "--seeds", "0", "--epochs", "3", "--batch-size", "16"];
    let run = cli(&[&["run"][..], &args].concat(), dir.path());
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let rep = cli(&[&["report"][..], &args].concat(), dir.path());
    assert_eq!(rep.status.code(), Some(0));
    let text = String::from_utf8(rep.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| ["baseline ", "ant ", "beta+ant ", "oracle "].iter().any(|r| l.starts_with(r))).collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert!(text.contains("± n/a"), "{text}");
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("table4").join("report.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["run", "--exp", "table4", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(cli(&["run", "--exp", "table9"], dir.path()).status.code(), Some(1));
    assert_eq!(cli(&["run", "--exp", "table4", "--seeds", ""], dir.path()).status.code(), Some(1));
    assert_eq!(cli(&["--help"], dir.path()).status.code(), Some(0));
    let missing = cli(&["report", "--exp", "lm", "--seeds", "0"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("lm/beta+ant/seed0"));
    // Four epochs cannot meet the language-model thresholds.
    let check = cli(&["run", "--exp", "lm", "--seeds", "0", "--epochs", "4", "--batch-size", "8", "--check"], dir.path());
    assert_eq!(check.status.code(), Some(2), "{}", String::from_utf8_lossy(&check.stderr));
    assert!(String::from_utf8_lossy(&check.stdout).contains("criterion 6"));
}

#[test]
fn dump_tasks_emits_one_line_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["dump-tasks", "--exp", "table1", "--n", "3"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["batch"]["batch"], 3);
    }
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["selftest"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn identical_config_and_seed_give_bitwise_identical_metrics() {
    for exp in [ExperimentId::Table1, ExperimentId::Table2, ExperimentId::Ablation, ExperimentId::Lm] {
        let cfg = tiny(exp);
        for c in conditions(&cfg) {
            let a = run_condition(&cfg, &c, 1).unwrap();
            let b = run_condition(&cfg, &c, 1).unwrap();
            let bits = |r: &route_lab_core::metrics::RunResult| r.scalars.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b), "{exp}/{}", c.name);
            assert_eq!(a.loss_curve, b.loss_curve);
        }
    }
}

#[test]
fn rerun_is_a_no_op_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentId::Table2);
    let mut store = ResultStore::open(dir.path()).unwrap();
    let first = run_experiment(&cfg, &mut store, false, |_| {}).unwrap();
    assert_eq!(first.executed.len(), 8);
    let csv = std::fs::read(dir.path().join("metrics.csv")).unwrap();
    let again = run_experiment(&cfg, &mut store, false, |_| {}).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped.len(), 8);
    let forced = run_experiment(&cfg, &mut store, true, |_| {}).unwrap();
    assert_eq!(forced.executed.len(), 8);
    assert_eq!(read_metrics_csv(&std::fs::read(dir.path().join("metrics.csv")).unwrap()).unwrap(), read_metrics_csv(&csv).unwrap());
    // Table 3 is a subset of Table 2 and is copied, not retrained.
    let t3 = tiny(ExperimentId::Table3);
    let copied = run_experiment(&t3, &mut store, false, |_| {}).unwrap();
    assert_eq!((copied.executed.len(), copied.reused.len()), (0, 2));
}

#[test]
fn unwritable_store_marks_the_experiment_partial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentId::Table3);
    let mut store = ResultStore::open(dir.path()).unwrap();
    // A file where the runs directory should be makes every commit fail.
    std::fs::write(dir.path().join("runs"), b"").unwrap();
    assert!(run_experiment(&cfg, &mut store, false, |_| {}).is_err());
    assert!(dir.path().join("table3.partial").exists());
    assert!(store.records().is_empty());
}
