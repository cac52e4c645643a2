use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, names, RunResult, DEFAULT_PI_GRID};
use crate::routing::{GateConfig, Router};
use crate::tasks::{gen_precision_regression, Batch, TaskKind, TaskSpec};

/// Gate over fixed oracle experts; the prediction is `Σ_i g_i y_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionRouter {
    pub store: ParamStore,
    pub router: Router,
}

impl PrecisionRouter {
    pub fn new(rng: &mut Rng, d_model: usize, n_experts: usize, config: GateConfig) -> Result<Self> {
        if config.use_beta || config.use_ant {
            return Err(Error::Config("the precision task uses a memoryless gate".into()));
        }
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, rng, "router", d_model, n_experts, config)?;
        Ok(Self { store, router })
    }
}

/// Per-expert mean squared error against the observed target.
pub fn expert_mse(batch: &Batch) -> Vec<f64> {
    let n = batch.n_experts;
    let mut s = vec![0.0; n];
    for (b, &y) in batch.observed.iter().enumerate() {
        for e in 0..n {
            let d = batch.expert_outputs[b * n + e] - y;
            s[e] += d * d;
        }
    }
    s.iter().map(|v| v / batch.batch as f64).collect()
}

/// Returns `(loss, gates)` where the loss is the MSE of the gated prediction.
pub fn precision_forward(model: &PrecisionRouter, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var)> {
    let (bsz, d, n) = (batch.batch, batch.d_model, batch.n_experts);
    let bound = model.router.bind(tape, &model.store)?;
    let x = tape.constant(Tensor::matrix(bsz, d, batch.inputs.clone())?);
    let trace = bound.forward(tape, x, bsz)?;
    let y = tape.constant(Tensor::matrix(bsz, n, batch.expert_outputs.clone())?);
    let weighted = tape.mul(trace.gates, y)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let pred = tape.matmul(weighted, ones)?;
    let target = tape.constant(Tensor::matrix(bsz, 1, batch.observed.clone())?);
    Ok((tape.mse(pred, target)?, trace.gates))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Leading and trailing steps averaged for early and final loss.
    pub window: usize,
}

/// Each step draws a batch, feeds its expert errors to the tracker, then
/// takes one optimizer step on the gate.
pub fn train_precision(model: &mut PrecisionRouter, spec: &TaskSpec, data_rng: &mut Rng, cfg: &PrecisionTrainConfig, result: &mut RunResult) -> Result<()> {
    if spec.kind != TaskKind::PrecisionRegression {
        return Err(Error::Config("train_precision needs the precision regression task".into()));
    }
    if cfg.steps == 0 || cfg.window == 0 || cfg.window > cfg.steps {
        return Err(Error::Config("invalid step count or window".into()));
    }
    let mut opt = AdamState::new(&model.store, cfg.lr);
    let mut tape = Tape::new();
    for step in 0..cfg.steps {
        let batch = gen_precision_regression(spec, data_rng, step as i64)?;
        model.router.update_precision(&expert_mse(&batch))?;
        if let Some(pi) = model.router.pi() {
            result.pi_trace.push(pi);
        }
        tape.reset();
        let (loss, _) = precision_forward(model, &mut tape, &batch)?;
        result.loss_curve.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        model.store.accumulate(&grads);
        opt.step(&mut model.store)?;
    }
    let w = cfg.window;
    let curve = &result.loss_curve;
    let early = curve[..w].iter().sum::<f64>() / w as f64;
    let last = curve[curve.len() - w..].iter().sum::<f64>() / w as f64;
    result.set(names::EARLY_LOSS, early);
    result.set(names::FINAL_LOSS, last);
    if spec.shifting && !result.pi_trace.is_empty() {
        let grid: Vec<usize> = DEFAULT_PI_GRID.iter().copied().filter(|&s| s < result.pi_trace.len()).collect();
        if let Some(c) = metrics::pi_timeline(&result.pi_trace, &grid)?.crossover {
            result.set(names::CROSSOVER_STEP, c as f64);
        }
    }
    Ok(())
}
