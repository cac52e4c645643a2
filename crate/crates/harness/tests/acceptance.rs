//! Acceptance suite: trains (or reuses) every experiment at its default
//! settings and prints one PASS/FAIL line per criterion.
//!
//! Runs are cached in `$CARGO_TARGET_TMPDIR/acceptance`, or in
//! `$ROUTE_LAB_ACCEPTANCE_OUT` when set, so only the first invocation trains.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use route_lab::checks::{self, Check, TITLES};
use route_lab::config::{ExperimentConfig, ExperimentId};
use route_lab::report::{render, RunSet};
use route_lab::runner::run_experiment;
use route_lab::store::ResultStore;
use route_lab::HarnessError;

fn cache_dir() -> PathBuf {
    std::env::var_os("ROUTE_LAB_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

/// Trains whatever is missing, then returns the experiment's run set.
fn runs(store: &mut ResultStore, exp: ExperimentId) -> Result<RunSet, HarnessError> {
    let mut cfg = ExperimentConfig::new(exp);
    cfg.out_dir = store.root().to_path_buf();
    let t0 = Instant::now();
    let summary = run_experiment(&cfg, store, false, |r| {
        eprintln!("  trained {}/{} seed {} in {:.1}s", r.experiment, r.condition, r.seed, r.wallclock);
    })?;
    if !summary.executed.is_empty() {
        eprintln!("  {exp}: {} run(s) trained in {:.0}s", summary.executed.len(), t0.elapsed().as_secs_f64());
    }
    let rs = RunSet::from_store(store, &cfg)?;
    eprintln!("{}", render(&rs)?.to_text());
    Ok(rs)
}

fn from_runs(store: &mut ResultStore, criterion: u8, exp: ExperimentId, check: impl Fn(&RunSet) -> Check) -> Check {
    match runs(store, exp) {
        Ok(rs) => check(&rs),
        Err(e) => Check {
            criterion,
            title: TITLES[criterion as usize - 1].to_string(),
            items: vec![checks::Item {
                description: format!("{exp} results available"),
                observed: e.to_string(),
                passed: false,
            }],
        },
    }
}

fn main() -> ExitCode {
    let dir = cache_dir();
    eprintln!("acceptance: run cache at {}", dir.display());
    let mut store = match ResultStore::open(&dir) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("acceptance: cannot open run cache: {e}");
            return ExitCode::FAILURE;
        }
    };
    let results = vec![
        from_runs(&mut store, 1, ExperimentId::Table1, checks::table1),
        from_runs(&mut store, 2, ExperimentId::Table2, checks::table2),
        from_runs(&mut store, 3, ExperimentId::Table3, checks::table3),
        from_runs(&mut store, 4, ExperimentId::Ablation, checks::ablation),
        checks::coverage(),
        from_runs(&mut store, 6, ExperimentId::Lm, checks::lm),
        checks::self_test(),
        from_runs(&mut store, 8, ExperimentId::Ablation, checks::saturation),
    ];

    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\nacceptance criteria");
    for c in &results {
        let _ = writeln!(out, "{c}");
    }
    let _ = writeln!(out);
    for c in &results {
        let _ = writeln!(out, "criterion {}: {}", c.criterion, if c.passed() { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|c| !c.passed()).count();
    let _ = writeln!(out, "{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
