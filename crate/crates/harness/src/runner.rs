use std::time::Instant;

use rayon::prelude::*;

use route_lab_core::autodiff::rng::stream_id;
use route_lab_core::autodiff::Rng;
use route_lab_core::metrics::{RunResult, DEFAULT_PI_GRID};
use route_lab_core::models::{
    train_lm, train_precision, train_toy, CharMoELM, LmTrainConfig, PrecisionRouter, PrecisionTrainConfig, ToyRouter, ToyTrainConfig,
};

use crate::conditions::{conditions, Condition, Plan};
use crate::config::ExperimentConfig;
use crate::store::{ResultStore, RunRecord};
use crate::HarnessError;

/// Metric name for Π of `expert` after the update at `step`.
pub fn pi_metric(expert: usize, step: usize) -> String {
    format!("pi{expert}_at_{step}")
}

/// Trains and evaluates one condition for one seed.
///
/// The data stream depends on the seed only, so every condition of an
/// experiment sees the same batches; the init stream also depends on the
/// condition name.
pub fn run_condition(cfg: &ExperimentConfig, cond: &Condition, seed: u64) -> Result<RunResult, HarnessError> {
    let mut result = RunResult::new(cfg.experiment.name(), &cond.name, seed);
    let mut data = Rng::new(seed);
    let mut init = Rng::for_init(seed, &cond.name);
    let mut eval = Rng::with_stream(seed, stream_id("eval"));
    match &cond.plan {
        Plan::Toy { spec, gate, view } => {
            let mut model = ToyRouter::new(&mut init, spec.d_model, spec.n_experts, gate.clone(), *view)?;
            let tc = ToyTrainConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                window: cfg.window,
                eval_size: cfg.eval_size,
            };
            train_toy(&mut model, spec, &mut data, &mut eval, &tc, &mut result)?;
        }
        Plan::Precision { spec, gate } => {
            let mut model = PrecisionRouter::new(&mut init, spec.d_model, spec.n_experts, gate.clone())?;
            let tc = PrecisionTrainConfig {
                steps: cfg.epochs,
                lr: cfg.lr,
                window: cfg.window,
            };
            train_precision(&mut model, spec, &mut data, &tc, &mut result)?;
            for step in DEFAULT_PI_GRID {
                if let Some(pi) = result.pi_trace.get(step).cloned() {
                    for (e, v) in pi.iter().enumerate() {
                        result.set(&pi_metric(e, step), *v);
                    }
                }
            }
        }
        Plan::Lm { spec, model } => {
            let mut lm = CharMoELM::new(&mut init, model.clone())?;
            let tc = LmTrainConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                eval_chunks: cfg.lm_eval_batches,
                coverage_delta: cfg.coverage_delta,
            };
            train_lm(&mut lm, spec, &mut data, &mut eval, &tc, &mut result)?;
        }
    }
    result.validate()?;
    Ok(result)
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub executed: Vec<(String, u64)>,
    /// Copied from another experiment with identical settings.
    pub reused: Vec<(String, u64)>,
    pub skipped: Vec<(String, u64)>,
}

/// Runs every condition × seed not already stored under this config hash
/// (all of them with `force`). A run stored by another experiment with the
/// same condition settings is copied instead of retrained. Runs execute in
/// parallel batches and commit in a fixed (condition, seed) order.
pub fn run_experiment(cfg: &ExperimentConfig, store: &mut ResultStore, force: bool, mut progress: impl FnMut(&RunRecord)) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let exp = cfg.experiment.name();
    let conds = conditions(cfg);
    let mut summary = RunSummary::default();
    let mut jobs = Vec::new();
    for c in &conds {
        let run_hash = cfg.run_hash(c);
        for &seed in &cfg.seeds {
            if force {
                jobs.push((c, seed, run_hash.clone()));
            } else if store.contains((exp, &c.name, seed, &hash)) {
                summary.skipped.push((c.name.clone(), seed));
            } else if let Some(src) = store.find_equivalent(&c.name, seed, &run_hash).cloned() {
                let mut full = store.load_run(&src)?;
                full.experiment = exp.to_string();
                let record = RunRecord {
                    experiment: exp.to_string(),
                    config_hash: hash.clone(),
                    ..src
                };
                commit_or_mark(store, record.clone(), &full)?;
                progress(&record);
                summary.reused.push((c.name.clone(), seed));
            } else {
                jobs.push((c, seed, run_hash.clone()));
            }
        }
    }
    let width = rayon::current_num_threads().max(1);
    for chunk in jobs.chunks(width) {
        let outcomes: Vec<_> = chunk
            .par_iter()
            .map(|(c, seed, _)| {
                let t0 = Instant::now();
                run_condition(cfg, c, *seed).map(|r| (r, t0.elapsed().as_secs_f64()))
            })
            .collect();
        for ((c, seed, run_hash), outcome) in chunk.iter().zip(outcomes) {
            let (full, wallclock) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    store.mark_partial(exp, &format!("{} seed {}: {e}", c.name, seed));
                    return Err(e);
                }
            };
            let record = RunRecord {
                experiment: exp.to_string(),
                condition: c.name.clone(),
                seed: *seed,
                config_hash: hash.clone(),
                run_hash: run_hash.clone(),
                metrics: full.scalars.clone(),
                wallclock,
            };
            commit_or_mark(store, record.clone(), &full)?;
            progress(&record);
            summary.executed.push((c.name.clone(), *seed));
        }
    }
    store.clear_partial(exp);
    Ok(summary)
}

fn commit_or_mark(store: &mut ResultStore, record: RunRecord, full: &RunResult) -> Result<(), HarnessError> {
    let (exp, what) = (record.experiment.clone(), format!("{} seed {}", record.condition, record.seed));
    store.commit(record, full).map_err(|e| {
        store.mark_partial(&exp, &format!("{what}: {e}"));
        e
    })
}
