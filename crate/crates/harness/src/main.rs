use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use route_lab::checks::{self, Check};
use route_lab::conditions::conditions;
use route_lab::config::{default_out_dir, parse_seeds, ExperimentConfig, ExperimentId};
use route_lab::report::{render, RunSet};
use route_lab::runner::run_experiment;
use route_lab::selftest;
use route_lab::store::ResultStore;
use route_lab::HarnessError;
use route_lab_core::autodiff::Rng;
use route_lab_core::tasks::generate;

/// Exit code when `--check` finds a failing criterion.
const EXIT_CHECK_FAILED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "route-lab", version, about = "Stateful mixture-of-experts routing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every condition × seed of an experiment and print its table.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        /// Retrain runs that already exist under the same configuration.
        #[arg(long)]
        force: bool,
        /// Evaluate the acceptance checks; exit 2 if any fails.
        #[arg(long)]
        check: bool,
    },
    /// Print the table for stored runs without training.
    Report {
        #[command(flatten)]
        exp: ExpArgs,
        /// Also write the table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        check: bool,
    },
    /// Print generated task batches as JSON lines.
    DumpTasks {
        #[arg(long)]
        exp: ExperimentId,
        /// Sequences per task.
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training step; the precision task depends on it.
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Run the gradient checks and invariants.
    Selftest,
}

#[derive(Debug, Args)]
struct ExpArgs {
    /// table1, table2, table3, table4, ablation (table5) or lm (table6).
    #[arg(long)]
    exp: ExperimentId,
    /// `0,1,2` or `0..5`. Defaults to 0..5 for `run`; `report` uses the
    /// seeds already stored.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output directory (default: $ROUTE_LAB_OUT or ./results).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::new(self.exp);
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
            cfg.window = cfg.window.min(e.max(1));
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.out_dir = self.out.clone().unwrap_or_else(default_out_dir);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_checks(list: &[Check]) -> bool {
    let mut ok = true;
    for c in list {
        println!("{c}");
        ok &= c.passed();
    }
    ok
}

fn report(store: &ResultStore, cfg: &ExperimentConfig, csv: Option<&PathBuf>, check: bool) -> anyhow::Result<bool> {
    let rs = RunSet::from_store(store, cfg)?;
    let rep = render(&rs)?;
    let text = rep.to_text();
    println!("{text}");
    let dir = cfg.out_dir.join(cfg.experiment.name());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_text = rep.to_csv()?;
    std::fs::write(dir.join("report.txt"), &text)?;
    std::fs::write(dir.join("report.csv"), &csv_text)?;
    if let Some(path) = csv {
        std::fs::write(path, &csv_text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(!check || print_checks(&checks::for_experiment(&rs)))
}

fn execute(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run { exp, force, check } => {
            let cfg = exp.config()?;
            let mut store = ResultStore::open(&cfg.out_dir)?;
            let total = conditions(&cfg).len() * cfg.seeds.len();
            let mut done = 0;
            let summary = run_experiment(&cfg, &mut store, force, |r| {
                done += 1;
                eprintln!("[{}] {} seed {} ({done}/{total}) {:.1}s", r.experiment, r.condition, r.seed, r.wallclock);
            })?;
            if !summary.skipped.is_empty() {
                eprintln!("[{}] {} run(s) already stored", cfg.experiment, summary.skipped.len());
            }
            if !summary.reused.is_empty() {
                eprintln!("[{}] copied {} run(s) with identical settings from other experiments", cfg.experiment, summary.reused.len());
            }
            let ok = report(&store, &cfg, None, check)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK_FAILED) })
        }
        Command::Report { exp, csv, check } => {
            let mut cfg = exp.config()?;
            let store = ResultStore::open(&cfg.out_dir)?;
            if exp.seeds.is_none() {
                let hash = cfg.config_hash();
                let stored: BTreeSet<u64> = store.records().iter().filter(|r| r.experiment == cfg.experiment.name() && r.config_hash == hash).map(|r| r.seed).collect();
                if !stored.is_empty() {
                    cfg.seeds = stored.into_iter().collect();
                }
            }
            let ok = report(&store, &cfg, csv.as_ref(), check)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK_FAILED) })
        }
        Command::DumpTasks { exp, n, seed, step } => {
            if n == 0 {
                return Err(HarnessError::Invalid("--n must be positive".into()).into());
            }
            let cfg = ExperimentConfig::new(exp);
            let mut seen = Vec::new();
            let mut out = std::io::stdout().lock();
            for c in conditions(&cfg) {
                let spec = route_lab_core::tasks::TaskSpec {
                    batch_size: n,
                    ..c.spec().clone()
                };
                if seen.contains(&spec) {
                    continue;
                }
                let batch = generate(&spec, &mut Rng::new(seed), step)?;
                let line = serde_json::json!({ "spec": spec, "seed": seed, "step": step, "batch": batch });
                writeln!(out, "{line}")?;
                seen.push(spec);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let results = selftest::run();
            let mut ok = true;
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "ok" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            println!("{} of {} checks passed", results.iter().filter(|r| r.passed).count(), results.len());
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
