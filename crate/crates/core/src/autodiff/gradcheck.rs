//! Central finite differences against reverse-mode gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-5)`; the floor keeps near-zero gradients from
/// dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Location of the largest error.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = rel_err(analytic, numeric);
        // NaN must surface as a failure.
        if !(e <= self.max_rel_err) {
            self.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
            self.worst = format!("{}: analytic {analytic} numeric {numeric}", at());
        }
        self.checked += 1;
    }
}

/// Compares d loss / d input for every element of every input.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut out = GradCheck::new();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = base - STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = base;
            out.record(analytic.data()[j], (up - down) / (2.0 * STEP), || format!("input {i} element {j}"));
        }
    }
    Ok(out)
}

/// Compares d loss / d parameter for every trainable parameter element.
pub fn check_params(store: &ParamStore, f: impl Fn(&ParamStore, &mut Tape) -> Result<Var>) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(s, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut probe = store.clone();
    let mut out = GradCheck::new();
    for (id, p) in store.iter() {
        if !p.requires_grad {
            continue;
        }
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for j in 0..p.value.len() {
            let base = p.value.data()[j];
            probe.value_mut(id).data_mut()[j] = base + STEP;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = base - STEP;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[j] = base;
            out.record(analytic.data()[j], (up - down) / (2.0 * STEP), || format!("{} [{j}]", p.name));
        }
    }
    Ok(out)
}
