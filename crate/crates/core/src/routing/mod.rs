//! Routing gates over a pool of experts.
//!
//! A gate maps a sequence of inputs to one distribution over experts per
//! step. Three optional mechanisms compose on top of the stateless affine
//! gate `softmax(W x_t + b)`:
//!
//! * β memory: the gate reads `h_t = σ(β_raw) ⊙ h_{t-1} + x_t` instead of `x_t`.
//! * Π precision: logits are multiplied elementwise by a per-expert precision
//!   vector maintained outside the gradient graph.
//! * Anticipation: a predictor `f(x_t, h_t)` estimates the next input and the
//!   gate reads that estimate, either directly or as an additive correction.

mod beta;
mod coverage;
mod gate;
mod precision;
mod predictor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use beta::{beta_step, BetaMemory, RouterState};
pub use coverage::{coverage_k, Coverage};
pub use gate::{combined_loss, BoundRouter, RouteTrace, Router};
pub use precision::{correctness_signal, PiMode, PrecisionTracker};
pub use predictor::{BoundPredictor, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaVariant {
    /// One decay per model dimension acting on `h`.
    PerDimension,
    /// One decay per expert acting on a membrane potential `U` driven by the
    /// routing projection, with a soft cap `ReLU(U - θ)` subtracted each step.
    PerExpertMembraneCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorIntegration {
    /// `W h_t + b + W_pred x̂`.
    Additive,
    /// `W x̂ + b`.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub use_beta: bool,
    pub use_pi: bool,
    pub use_ant: bool,
    pub beta_variant: BetaVariant,
    pub predictor_integration: PredictorIntegration,
    pub beta_init: f64,
    /// When false β stays at `beta_init`.
    pub learn_beta: bool,
    pub pi_alpha: f64,
    pub pi_eps0: f64,
    pub pi_mode: PiMode,
    /// Starting value of every running variance.
    pub pi_var_init: f64,
    pub lambda_pred: f64,
    pub membrane_theta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            use_beta: false,
            use_pi: false,
            use_ant: false,
            beta_variant: BetaVariant::PerDimension,
            predictor_integration: PredictorIntegration::Direct,
            beta_init: 0.9,
            learn_beta: true,
            pi_alpha: 0.95,
            pi_eps0: 1e-4,
            pi_mode: PiMode::Mse,
            pi_var_init: 0.5,
            lambda_pred: 0.5,
            membrane_theta: 1.0,
        }
    }
}

impl GateConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn with(use_beta: bool, use_pi: bool, use_ant: bool) -> Self {
        Self {
            use_beta,
            use_pi,
            use_ant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta_init) {
            return Err(Error::Config(format!("beta_init must lie in (0, 1), got {}", self.beta_init)));
        }
        if !open_unit(self.pi_alpha) {
            return Err(Error::Config(format!("pi_alpha must lie in (0, 1), got {}", self.pi_alpha)));
        }
        if !(self.pi_eps0 > 0.0) {
            return Err(Error::Config(format!("pi_eps0 must be positive, got {}", self.pi_eps0)));
        }
        if !(self.pi_var_init > 0.0) {
            return Err(Error::Config(format!("pi_var_init must be positive, got {}", self.pi_var_init)));
        }
        if !(self.lambda_pred >= 0.0) {
            return Err(Error::Config(format!("lambda_pred must be non-negative, got {}", self.lambda_pred)));
        }
        if !self.membrane_theta.is_finite() {
            return Err(Error::Config("membrane_theta must be finite".into()));
        }
        if self.use_beta && self.beta_variant == BetaVariant::PerExpertMembraneCap && self.use_ant {
            return Err(Error::Config("the membrane-cap β variant does not compose with anticipation".into()));
        }
        Ok(())
    }

    /// Short condition label such as `beta+pi+ant` or `baseline`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_beta {
            parts.push("beta");
        }
        if self.use_pi {
            parts.push("pi");
        }
        if self.use_ant {
            parts.push("ant");
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}
