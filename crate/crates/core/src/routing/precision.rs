use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiMode {
    /// Signal is each expert's batch mean squared prediction error.
    Mse,
    /// Signal is each expert's batch mean of `(1 − [expert is the label])²`.
    Correctness,
}

/// Per-expert running variance with derived precision `Π = 1/(var + ε₀)`.
///
/// Plain numbers, never recorded on a tape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionTracker {
    var: Vec<f64>,
    pub mode: PiMode,
    pub alpha: f64,
    pub eps0: f64,
    updates: u64,
}

impl PrecisionTracker {
    pub fn new(n_experts: usize, mode: PiMode, alpha: f64, eps0: f64, var_init: f64) -> Self {
        Self {
            var: vec![var_init; n_experts],
            mode,
            alpha,
            eps0,
            updates: 0,
        }
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn pi(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + self.eps0)).collect()
    }

    /// `var ← α·var + (1−α)·signal`.
    pub fn update(&mut self, signal: &[f64]) -> Result<()> {
        if signal.len() != self.var.len() {
            return Err(Error::Shape {
                op: "pi_update",
                detail: format!("{} experts, signal of length {}", self.var.len(), signal.len()),
            });
        }
        if let Some((index, &value)) = signal.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NegativeSignal { index, value });
        }
        for (v, s) in self.var.iter_mut().zip(signal) {
            *v = self.alpha * *v + (1.0 - self.alpha) * s;
        }
        self.updates += 1;
        Ok(())
    }
}

/// Correctness-mode signal: for each expert the mean over labels of
/// `(1 − [label == expert])²`.
pub fn correctness_signal(labels: impl IntoIterator<Item = usize>, n_experts: usize) -> Vec<f64> {
    let mut hits = vec![0usize; n_experts];
    let mut n = 0usize;
    for l in labels {
        hits[l] += 1;
        n += 1;
    }
    hits.iter().map(|&h| if n == 0 { 0.0 } else { 1.0 - h as f64 / n as f64 }).collect()
}
