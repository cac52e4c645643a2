use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Linear, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, names, RunResult};
use crate::routing::{combined_loss, coverage_k, GateConfig, PredictorIntegration, Router};
use crate::tasks::{gen_char_lm, Batch, TaskSpec};

use super::toy::to_sequence_major;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub n_experts: usize,
    pub gate: GateConfig,
    /// Input step whose target is the first token of the second domain.
    pub transition_step: usize,
    pub transition_weight: f64,
}

impl LmConfig {
    pub fn new(gate: GateConfig) -> Self {
        Self {
            vocab: 26,
            d_model: 64,
            hidden: 256,
            n_experts: 2,
            gate,
            transition_step: 31,
            transition_weight: 5.0,
        }
    }

    pub fn standard() -> Self {
        Self::new(GateConfig::baseline())
    }

    pub fn beta() -> Self {
        Self::new(GateConfig::with(true, false, false))
    }

    pub fn beta_ant() -> Self {
        Self::new(GateConfig {
            predictor_integration: PredictorIntegration::Additive,
            ..GateConfig::with(true, false, true)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Embedding, routed mixture of feed-forward experts, output head.
///
/// Experts and the head act on one token at a time, so experts are evaluated
/// once per vocabulary entry and gathered per position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharMoELM {
    pub config: LmConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub router: Router,
    pub experts: Vec<Expert>,
    pub head: Linear,
}

impl CharMoELM {
    pub fn new(rng: &mut Rng, config: LmConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let (v, d, h) = (config.vocab, config.d_model, config.hidden);
        let emb: Vec<f64> = (0..v * d).map(|_| rng.gaussian()).collect();
        let embedding = store.add("embedding", Tensor::matrix(v, d, emb)?);
        let router = Router::new(&mut store, rng, "router", d, config.n_experts, config.gate.clone())?;
        let experts = (0..config.n_experts)
            .map(|e| Expert {
                fc1: Linear::new(&mut store, rng, &format!("expert{e}.fc1"), d, h, true),
                fc2: Linear::new(&mut store, rng, &format!("expert{e}.fc2"), h, d, true),
            })
            .collect();
        let head = Linear::new(&mut store, rng, "head", d, v, true);
        Ok(Self {
            config,
            store,
            embedding,
            router,
            experts,
            head,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOutput {
    /// Weighted cross-entropy plus the weighted prediction term.
    pub loss: Var,
    pub ce: Var,
    pub pred_loss: Option<Var>,
    /// `[steps·B, vocab]`, step-major.
    pub logits: Var,
    /// `[steps·B, n_experts]`, step-major.
    pub gates: Var,
    pub steps: usize,
    pub batch: usize,
}

/// Teacher-forced next-token prediction over input steps `0..T-1`.
///
/// `force_gates`, when given, replaces the router output with fixed
/// `[steps·B, n_experts]` weights.
pub fn lm_forward_with(model: &CharMoELM, tape: &mut Tape, batch: &Batch, force_gates: Option<&Tensor>) -> Result<LmOutput> {
    let cfg = &model.config;
    let (bsz, t_n) = (batch.batch, batch.steps);
    if t_n < 2 {
        return Err(Error::InvalidArgument("sequences need at least two tokens".into()));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Token(bad));
    }
    let steps = t_n - 1;
    let mut inputs = Vec::with_capacity(steps * bsz);
    let mut targets = Vec::with_capacity(steps * bsz);
    let mut weights = Vec::with_capacity(steps * bsz);
    for t in 0..steps {
        let w = if t == cfg.transition_step { cfg.transition_weight } else { 1.0 };
        for b in 0..bsz {
            inputs.push(batch.token(b, t));
            targets.push(batch.token(b, t + 1));
            weights.push(w);
        }
    }

    let table = tape.param(&model.store, model.embedding);
    let bound = model.router.bind(tape, &model.store)?;
    let trace = bound.forward_indexed(tape, table, &inputs, bsz)?;
    let gates = match force_gates {
        Some(g) => tape.constant(g.clone()),
        None => trace.gates,
    };

    let mut mix: Option<Var> = None;
    for (e, ex) in model.experts.iter().enumerate() {
        let fc1 = ex.fc1.bind(tape, &model.store);
        let fc2 = ex.fc2.bind(tape, &model.store);
        let a = fc1.apply(tape, table)?;
        let a = tape.gelu(a);
        let per_token = fc2.apply(tape, a)?;
        let out = tape.gather_rows(per_token, &inputs)?;
        let g = tape.column(gates, e)?;
        let weighted = tape.mul(out, g)?;
        mix = Some(match mix {
            Some(m) => tape.add(m, weighted)?,
            None => weighted,
        });
    }
    let mix = mix.ok_or_else(|| Error::Config("model has no experts".into()))?;
    let head = model.head.bind(tape, &model.store);
    let logits = head.apply(tape, mix)?;
    let ce = tape.weighted_cross_entropy(logits, &targets, &weights)?;

    let pred_loss = match trace.x_hat {
        Some(x_hat) => {
            let next = tape.gather_rows(table, &targets)?;
            let next = tape.detach(next);
            Some(tape.mse(x_hat, next)?)
        }
        None => None,
    };
    let loss = combined_loss(tape, ce, pred_loss, model.router.config.lambda_pred)?;
    Ok(LmOutput {
        loss,
        ce,
        pred_loss,
        logits,
        gates,
        steps,
        batch: bsz,
    })
}

pub fn lm_forward(model: &CharMoELM, tape: &mut Tape, batch: &Batch) -> Result<LmOutput> {
    lm_forward_with(model, tape, batch, None)
}

/// Mean gate weight per input step, `mean[t][e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub mean: Vec<Vec<f64>>,
}

impl GateTrace {
    /// Averages step-major `[steps·B, N]` gates over the batch.
    pub fn from_step_major(gates: &Tensor, steps: usize, batch: usize) -> Self {
        let n = gates.cols();
        let mean = (0..steps)
            .map(|t| {
                let mut m = vec![0.0; n];
                for b in 0..batch {
                    for (e, v) in m.iter_mut().enumerate() {
                        *v += gates.at(t * batch + b, e);
                    }
                }
                m.iter().map(|v| v / batch as f64).collect()
            })
            .collect();
        Self { mean }
    }

    /// Mean of per-step means over `window`.
    pub fn window_mean(&self, window: RangeInclusive<usize>) -> Result<Vec<f64>> {
        let rows = self
            .mean
            .get(window.clone())
            .ok_or_else(|| Error::Metric(format!("window {window:?} outside {} steps", self.mean.len())))?;
        let n = rows.first().map_or(0, |r| r.len());
        let mut acc = vec![0.0; n];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        Ok(acc.iter().map(|v| v / rows.len() as f64).collect())
    }
}

/// Steps well inside the second domain used to find its expert.
pub const MID_WINDOW: RangeInclusive<usize> = 40..=62;

/// Expert with the highest mean gate weight over `window`.
pub fn identify_domain_expert(trace: &GateTrace, window: RangeInclusive<usize>) -> Result<usize> {
    let m = trace.window_mean(window)?;
    let best = metrics::argmax(&m);
    let runner_up = m
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != best)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = m[best] - runner_up;
    if gap.abs() <= 1e-6 {
        return Err(Error::DegenerateSpecialization(gap.abs()));
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmEval {
    pub bpc_all: f64,
    pub bpc_transition: f64,
    pub trace: GateTrace,
}

/// Metrics on `n_chunks` fresh batches of the task.
pub fn evaluate_lm(model: &CharMoELM, spec: &TaskSpec, rng: &mut Rng, n_chunks: usize) -> Result<LmEval> {
    if n_chunks == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one batch".into()));
    }
    let mut tape = Tape::new();
    let (mut all, mut trans) = (0.0, 0.0);
    let mut trace_sum: Option<Vec<Vec<f64>>> = None;
    for _ in 0..n_chunks {
        let batch = gen_char_lm(spec, rng)?;
        tape.reset();
        let out = lm_forward(model, &mut tape, &batch)?;
        let (steps, bsz) = (out.steps, out.batch);
        let logits = to_sequence_major(tape.value(out.logits).data(), steps, bsz, model.config.vocab);
        let mut targets = Vec::with_capacity(steps * bsz);
        for b in 0..bsz {
            for t in 0..steps {
                targets.push(batch.token(b, t + 1));
            }
        }
        let every: Vec<usize> = (0..steps).collect();
        all += metrics::bpc(&logits, &targets, &every)?;
        trans += metrics::bpc(&logits, &targets, &[model.config.transition_step])?;
        let tr = GateTrace::from_step_major(tape.value(out.gates), steps, bsz);
        match trace_sum.as_mut() {
            None => trace_sum = Some(tr.mean),
            Some(acc) => {
                for (a, r) in acc.iter_mut().zip(&tr.mean) {
                    for (x, y) in a.iter_mut().zip(r) {
                        *x += y;
                    }
                }
            }
        }
    }
    let k = n_chunks as f64;
    let mean = trace_sum
        .unwrap_or_default()
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / k).collect())
        .collect();
    Ok(LmEval {
        bpc_all: all / k,
        bpc_transition: trans / k,
        trace: GateTrace { mean },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Evaluation batches after training.
    pub eval_chunks: usize,
    /// Coverage target `1 − δ` for K.
    pub coverage_delta: f64,
}

pub fn train_lm(model: &mut CharMoELM, spec: &TaskSpec, data_rng: &mut Rng, eval_rng: &mut Rng, cfg: &LmTrainConfig, result: &mut RunResult) -> Result<LmEval> {
    let mut opt = AdamState::new(&model.store, cfg.lr);
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        let batch = gen_char_lm(spec, data_rng)?;
        tape.reset();
        let out = lm_forward(model, &mut tape, &batch)?;
        result.loss_curve.push(tape.value(out.loss).item());
        let grads = tape.backward(out.loss)?;
        model.store.accumulate(&grads);
        opt.step(&mut model.store)?;
    }
    if let Some(beta) = model.router.beta_values(&model.store) {
        result.set(names::BETA_MEAN, beta.iter().sum::<f64>() / beta.len() as f64);
        result.beta = beta;
    }
    let eval = evaluate_lm(model, spec, eval_rng, cfg.eval_chunks)?;
    result.set(names::BPC_ALL, eval.bpc_all);
    result.set(names::BPC_TRANSITION, eval.bpc_transition);
    let expert = identify_domain_expert(&eval.trace, MID_WINDOW)?;
    let p_trans = eval.trace.mean[model.config.transition_step][expert];
    let p_mid = eval.trace.window_mean(MID_WINDOW)?[expert];
    result.set(names::DOMAIN_EXPERT, expert as f64);
    result.set(names::P_CORRECT_TRANSITION, p_trans);
    result.set(names::P_CORRECT_MID, p_mid);
    let cov = coverage_k(p_trans, cfg.coverage_delta)?;
    result.set(names::K99, cov.real());
    result.set(names::K99_CEIL, cov.k as f64);
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (CharMoELM, Batch) {
        let cfg = LmConfig {
            d_model: 6,
            hidden: 8,
            transition_step: 3,
            ..LmConfig::beta_ant()
        };
        let model = CharMoELM::new(&mut Rng::for_init(0, "lm"), cfg).unwrap();
        let spec = TaskSpec {
            batch_size: 3,
            seq_len: 8,
            switch_step: 4,
            ..TaskSpec::char_lm()
        };
        let batch = gen_char_lm(&spec, &mut Rng::new(0)).unwrap();
        (model, batch)
    }

    #[test]
    fn gate_rows_sum_to_one() {
        let (model, batch) = tiny();
        let mut tape = Tape::new();
        let out = lm_forward(&model, &mut tape, &batch).unwrap();
        for row in tape.value(out.gates).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(out.pred_loss.is_some());
    }

    #[test]
    fn rejects_out_of_vocabulary_tokens() {
        let (model, mut batch) = tiny();
        batch.tokens[0] = 26;
        assert!(matches!(lm_forward(&model, &mut Tape::new(), &batch), Err(Error::Token(26))));
    }

    #[test]
    fn identifies_specialised_expert() {
        let mean = (0..63).map(|t| if t < 32 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        assert_eq!(identify_domain_expert(&GateTrace { mean }, MID_WINDOW).unwrap(), 1);
        let flat = GateTrace { mean: vec![vec![0.5, 0.5]; 63] };
        assert!(matches!(identify_domain_expert(&flat, MID_WINDOW), Err(Error::DegenerateSpecialization(_))));
    }
}
