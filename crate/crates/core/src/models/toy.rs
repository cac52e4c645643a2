use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, names, RunResult};
use crate::routing::{combined_loss, correctness_signal, GateConfig, PiMode, Router};
use crate::tasks::{generate, Batch, TaskKind, TaskSpec};

/// What the gate reads at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputView {
    /// `x_t`.
    Current,
    /// `x_{t+1}`: the oracle upper bound.
    Next,
    /// `(1/T) Σ_t x_t`, one gate per sequence read at the final step.
    MeanPool,
}

/// A routing gate trained directly against ground-truth expert labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyRouter {
    pub store: ParamStore,
    pub router: Router,
    pub view: InputView,
}

impl ToyRouter {
    pub fn new(rng: &mut Rng, d_model: usize, n_experts: usize, config: GateConfig, view: InputView) -> Result<Self> {
        if view != InputView::Current && (config.use_beta || config.use_ant) {
            return Err(Error::Config("oracle and mean-pool views use the plain affine gate".into()));
        }
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, rng, "router", d_model, n_experts, config)?;
        Ok(Self { store, router, view })
    }
}

/// Result of [`toy_forward`]. Gates and labels cover `steps` consecutive
/// steps of the batch starting at `first_step`.
#[derive(Debug, Clone)]
pub struct ToyOutput {
    pub loss: Var,
    pub routing_loss: Var,
    pub pred_loss: Option<Var>,
    /// `[B, steps, N]`.
    pub gates: Tensor,
    /// `[B, steps]`.
    pub labels: Vec<Option<usize>>,
    /// `[B, steps, width]` router state when β is on.
    pub states: Option<Tensor>,
    pub steps: usize,
    pub first_step: usize,
}

/// Reorders a step-major `[steps·B, w]` array into `[B, steps, w]`.
pub fn to_sequence_major(data: &[f64], steps: usize, batch: usize, width: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for t in 0..steps {
        for b in 0..batch {
            let src = (t * batch + b) * width;
            let dst = (b * steps + t) * width;
            out[dst..dst + width].copy_from_slice(&data[src..src + width]);
        }
    }
    Tensor::new(vec![batch, steps, width], out).expect("sequence-major shape")
}

fn last_labelled_step(batch: &Batch) -> Result<usize> {
    (0..batch.steps)
        .rev()
        .find(|&t| (0..batch.batch).any(|b| batch.label(b, t).is_some()))
        .ok_or_else(|| Error::InvalidArgument("batch has no routing labels".into()))
}

/// Gates, routing cross-entropy against the labels and, when anticipation is
/// on, the next-input prediction loss against the detached next input.
pub fn toy_forward(model: &ToyRouter, tape: &mut Tape, batch: &Batch) -> Result<ToyOutput> {
    let bsz = batch.batch;
    let d = batch.d_model;
    let n = model.router.n_experts;
    let last = last_labelled_step(batch)?;
    let (steps, first_step, xs_data) = match model.view {
        InputView::Current => (last + 1, 0, batch.step_major_inputs(0, last + 1)),
        InputView::Next => {
            if last + 1 >= batch.steps {
                return Err(Error::InvalidArgument("oracle view needs a next input for every labelled step".into()));
            }
            (last + 1, 0, batch.step_major_inputs(1, last + 1))
        }
        InputView::MeanPool => {
            let mut pooled = vec![0.0; bsz * d];
            for b in 0..bsz {
                for t in 0..batch.steps {
                    for (p, x) in pooled[b * d..(b + 1) * d].iter_mut().zip(batch.input(b, t)) {
                        *p += x / batch.steps as f64;
                    }
                }
            }
            (1, last, pooled)
        }
    };
    let bound = model.router.bind(tape, &model.store)?;
    let xs = tape.constant(Tensor::matrix(steps * bsz, d, xs_data)?);
    let trace = bound.forward(tape, xs, bsz)?;

    let mut labels = Vec::with_capacity(bsz * steps);
    for b in 0..bsz {
        for t in 0..steps {
            labels.push(batch.label(b, first_step + t));
        }
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for t in 0..steps {
        for b in 0..bsz {
            if let Some(l) = labels[b * steps + t] {
                rows.push(t * bsz + b);
                targets.push(l);
            }
        }
    }
    let logits = if rows.len() == steps * bsz {
        trace.logits
    } else {
        tape.gather_rows(trace.logits, &rows)?
    };
    let routing_loss = tape.cross_entropy(logits, &targets)?;

    let pred_loss = match trace.x_hat {
        Some(x_hat) => {
            let usable = steps.min(batch.steps - 1 - first_step);
            if usable == 0 {
                None
            } else {
                let pred = if usable == steps { x_hat } else { tape.slice_rows(x_hat, 0, usable * bsz)? };
                let next = tape.constant(Tensor::matrix(usable * bsz, d, batch.step_major_inputs(first_step + 1, usable))?);
                Some(tape.mse(pred, next)?)
            }
        }
        None => None,
    };
    let loss = combined_loss(tape, routing_loss, pred_loss, model.router.config.lambda_pred)?;

    let gates = to_sequence_major(tape.value(trace.gates).data(), steps, bsz, n);
    let states = trace.states.map(|s| {
        let v = tape.value(s);
        to_sequence_major(v.data(), steps, bsz, v.cols())
    });
    Ok(ToyOutput {
        loss,
        routing_loss,
        pred_loss,
        gates,
        labels,
        states,
        steps,
        first_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Trailing epochs averaged for the reported training accuracy.
    pub window: usize,
    /// Sequences in the held-out evaluation batch.
    pub eval_size: usize,
}

/// Step whose input still belongs to the first domain while its label
/// already names the second one.
pub fn transition_step(spec: &TaskSpec) -> Option<usize> {
    match spec.kind {
        TaskKind::Anticipation => spec.switch_step.checked_sub(1),
        _ => None,
    }
}

/// Mean of the first domain-block of the state over the batch at step `t`.
fn block_mean(states: &Tensor, t: usize, block: usize) -> f64 {
    let (b_n, t_n, w) = (states.shape()[0], states.shape()[1], states.shape()[2]);
    let mut s = 0.0;
    for b in 0..b_n {
        let off = (b * t_n + t) * w;
        s += states.data()[off..off + block].iter().sum::<f64>();
    }
    s / (b_n * block) as f64
}

/// Trains a toy router with one freshly generated batch per epoch and
/// reports windowed training accuracy plus held-out metrics.
pub fn train_toy(model: &mut ToyRouter, spec: &TaskSpec, data_rng: &mut Rng, eval_rng: &mut Rng, cfg: &ToyTrainConfig, result: &mut RunResult) -> Result<()> {
    if cfg.epochs == 0 || cfg.window == 0 {
        return Err(Error::Config("epochs and window must be positive".into()));
    }
    let mut opt = AdamState::new(&model.store, cfg.lr);
    let mut tape = Tape::new();
    let trans = transition_step(spec);
    let window_start = cfg.epochs.saturating_sub(cfg.window);
    let (mut acc_sum, mut acc_t_sum, mut n_win) = (0.0, 0.0, 0usize);
    let mut step_sums: Vec<Option<f64>> = Vec::new();
    let mut pred_curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let batch = generate(spec, data_rng, epoch as u64)?;
        tape.reset();
        let out = toy_forward(model, &mut tape, &batch)?;
        result.loss_curve.push(tape.value(out.loss).item());
        if let Some(p) = out.pred_loss {
            pred_curve.push(tape.value(p).item());
        }
        if epoch >= window_start {
            n_win += 1;
            acc_sum += metrics::acc_all(&out.gates, &out.labels)?;
            if let Some(t) = trans {
                acc_t_sum += metrics::acc_at(t - out.first_step, &out.gates, &out.labels)?;
            }
            let per_step = metrics::per_step_acc(&out.gates, &out.labels)?;
            step_sums.resize(per_step.len(), Some(0.0));
            for (s, v) in step_sums.iter_mut().zip(&per_step) {
                *s = s.zip(*v).map(|(a, b)| a + b);
            }
        }
        let grads = tape.backward(out.loss)?;
        model.store.accumulate(&grads);
        opt.step(&mut model.store)?;
        if let Some(tracker) = model.router.tracker.as_ref() {
            if tracker.mode == PiMode::Correctness {
                let signal = correctness_signal(out.labels.iter().flatten().copied(), model.router.n_experts);
                model.router.update_precision(&signal)?;
            }
        }
        if let Some(beta) = model.router.beta_values(&model.store) {
            debug_assert!(beta.iter().all(|&b| b > 0.0 && b < 1.0));
        }
    }

    result.set(names::ACC_ALL, acc_sum / n_win as f64);
    if trans.is_some() {
        result.set(names::ACC_TRANSITION, acc_t_sum / n_win as f64);
    }
    result.per_step_acc = step_sums.iter().map(|s| s.map(|v| v / n_win as f64)).collect();
    if !pred_curve.is_empty() {
        let k = pred_curve.len().min(50);
        result.set(names::PRED_LOSS_EARLY, pred_curve[..k].iter().sum::<f64>() / k as f64);
        result.set(names::PRED_LOSS_FINAL, pred_curve[pred_curve.len() - k..].iter().sum::<f64>() / k as f64);
    }
    if let Some(beta) = model.router.beta_values(&model.store) {
        result.set(names::BETA_MEAN, beta.iter().sum::<f64>() / beta.len() as f64);
        result.beta = beta;
    }
    if let Some(pi) = model.router.pi() {
        result.pi_trace.push(pi);
    }

    if cfg.eval_size > 0 {
        let eval_spec = TaskSpec {
            batch_size: cfg.eval_size,
            ..spec.clone()
        };
        let batch = generate(&eval_spec, eval_rng, cfg.epochs as u64)?;
        tape.reset();
        let out = toy_forward(model, &mut tape, &batch)?;
        result.set(names::EVAL_ACC_ALL, metrics::acc_all(&out.gates, &out.labels)?);
        if let Some(t) = trans {
            result.set(names::EVAL_ACC_TRANSITION, metrics::acc_at(t - out.first_step, &out.gates, &out.labels)?);
            if let Some(states) = &out.states {
                if t >= 1 && model.router.config.beta_variant == crate::routing::BetaVariant::PerDimension {
                    let block = spec.d_model / spec.n_domains();
                    result.set(names::H_BLOCK_T4, block_mean(states, t - 1, block));
                    result.set(names::H_BLOCK_T5, block_mean(states, t, block));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_major_reorder() {
        // steps=2, batch=3, width=1; step-major rows t*3+b hold 10t+b.
        let data = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        let t = to_sequence_major(&data, 2, 3, 1);
        assert_eq!(t.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    }

    #[test]
    fn untrained_router_runs_all_views() {
        let spec = TaskSpec {
            batch_size: 8,
            ..TaskSpec::anticipation()
        };
        let batch = generate(&spec, &mut Rng::new(0), 0).unwrap();
        for (cfg, view) in [
            (GateConfig::baseline(), InputView::Current),
            (GateConfig::baseline(), InputView::Next),
            (GateConfig::baseline(), InputView::MeanPool),
            (GateConfig::with(true, true, true), InputView::Current),
        ] {
            let model = ToyRouter::new(&mut Rng::for_init(0, "t"), 16, 4, cfg, view).unwrap();
            let mut tape = Tape::new();
            let out = toy_forward(&model, &mut tape, &batch).unwrap();
            assert!(tape.value(out.loss).item().is_finite());
            let sums: Vec<f64> = out.gates.data().chunks(4).map(|c| c.iter().sum()).collect();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        }
    }
}
