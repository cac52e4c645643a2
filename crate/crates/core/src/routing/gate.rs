use serde::{Deserialize, Serialize};

use super::beta::{beta_step, BetaMemory, RouterState};
use super::precision::PrecisionTracker;
use super::predictor::{BoundPredictor, Predictor};
use super::{BetaVariant, GateConfig, PredictorIntegration};
use crate::autodiff::{BoundLinear, Linear, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A routing gate over `n_experts`, assembled from a [`GateConfig`].
///
/// Only the parameters of enabled mechanisms exist in the store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Router {
    pub config: GateConfig,
    pub d_model: usize,
    pub n_experts: usize,
    pub w: Linear,
    pub beta: Option<BetaMemory>,
    pub predictor: Option<Predictor>,
    pub tracker: Option<PrecisionTracker>,
}

impl Router {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, n_experts: usize, config: GateConfig) -> Result<Self> {
        config.validate()?;
        let w = Linear::new(store, rng, &format!("{name}.w"), d_model, n_experts, true);
        let beta = config.use_beta.then(|| {
            let size = match config.beta_variant {
                BetaVariant::PerDimension => d_model,
                BetaVariant::PerExpertMembraneCap => n_experts,
            };
            BetaMemory::new(store, name, size, config.beta_variant, config.beta_init, config.learn_beta)
        });
        let predictor = config.use_ant.then(|| {
            let additive = config.predictor_integration == PredictorIntegration::Additive;
            Predictor::new(store, rng, &format!("{name}.pred"), d_model, n_experts, additive)
        });
        let tracker = config
            .use_pi
            .then(|| PrecisionTracker::new(n_experts, config.pi_mode, config.pi_alpha, config.pi_eps0, config.pi_var_init));
        Ok(Self {
            config,
            d_model,
            n_experts,
            w,
            beta,
            predictor,
            tracker,
        })
    }

    pub fn beta_values(&self, store: &ParamStore) -> Option<Vec<f64>> {
        self.beta.map(|b| b.beta(store))
    }

    pub fn pi(&self) -> Option<Vec<f64>> {
        self.tracker.as_ref().map(|t| t.pi())
    }

    /// Feeds the precision tracker; a no-op when Π is disabled.
    pub fn update_precision(&mut self, signal: &[f64]) -> Result<()> {
        match self.tracker.as_mut() {
            Some(t) => t.update(signal),
            None => Ok(()),
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Result<BoundRouter> {
        if self.config.use_ant && self.predictor.is_none() {
            return Err(Error::MissingPredictor);
        }
        if self.config.use_ant
            && self.config.predictor_integration == PredictorIntegration::Additive
            && self.predictor.is_some_and(|p| p.w_pred.is_none())
        {
            return Err(Error::MissingPredictor);
        }
        if self.config.use_beta && self.beta.is_none() {
            return Err(Error::Config("β enabled without a β memory".into()));
        }
        let pi = match (&self.tracker, self.config.use_pi) {
            (Some(t), true) => Some(tape.constant(Tensor::row(&t.pi()))),
            (None, true) => return Err(Error::Config("Π enabled without a tracker".into())),
            _ => None,
        };
        Ok(BoundRouter {
            config: self.config.clone(),
            d_model: self.d_model,
            n_experts: self.n_experts,
            w: self.w.bind(tape, store),
            beta: self.beta.map(|b| b.bind(tape, store)),
            predictor: self.predictor.map(|p| p.bind(tape, store)),
            pi,
        })
    }
}

/// Gate outputs for a step-major stack of `steps × batch` rows.
#[derive(Debug, Clone, Copy)]
pub struct RouteTrace {
    /// Pre-softmax logits, `[steps·batch, n_experts]`.
    pub logits: Var,
    /// `softmax(logits)`.
    pub gates: Var,
    /// `h_t` (or `U_t`) per row when β is enabled.
    pub states: Option<Var>,
    /// `x̂_{t+1}` per row when anticipation is enabled.
    pub x_hat: Option<Var>,
    pub steps: usize,
    pub batch: usize,
}

/// A [`Router`] whose parameters and current Π are recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundRouter {
    pub config: GateConfig,
    pub d_model: usize,
    pub n_experts: usize,
    w: BoundLinear,
    beta: Option<Var>,
    predictor: Option<BoundPredictor>,
    pi: Option<Var>,
}

impl BoundRouter {
    pub fn init_state(&self, tape: &mut Tape, batch: usize) -> RouterState {
        let width = match self.config.beta_variant {
            BetaVariant::PerDimension => self.d_model,
            BetaVariant::PerExpertMembraneCap => self.n_experts,
        };
        RouterState::reset(tape, batch, width)
    }

    fn membrane(&self) -> bool {
        self.config.use_beta && self.config.beta_variant == BetaVariant::PerExpertMembraneCap
    }

    fn compose(&self, tape: &mut Tape, x: Var, state: Option<Var>, x_proj: Option<Var>) -> Result<(Var, Option<Var>)> {
        let (mut z, x_hat) = if self.membrane() {
            (state.expect("membrane state"), None)
        } else {
            let h = if self.config.use_beta { state } else { None };
            let read = h.unwrap_or(x);
            if self.config.use_ant {
                let p = self.predictor.as_ref().ok_or(Error::MissingPredictor)?;
                let x_hat = match x_proj {
                    Some(xp) => p.predict_from_projection(tape, xp, h)?,
                    None => p.predict_next(tape, x, h)?,
                };
                let z = match self.config.predictor_integration {
                    PredictorIntegration::Direct => self.w.apply(tape, x_hat)?,
                    PredictorIntegration::Additive => {
                        let base = self.w.apply(tape, read)?;
                        let corr = p.w_pred.ok_or(Error::MissingPredictor)?.apply(tape, x_hat)?;
                        tape.add(base, corr)?
                    }
                };
                (z, Some(x_hat))
            } else {
                (self.w.apply(tape, read)?, None)
            }
        };
        if let Some(pi) = self.pi {
            z = tape.mul(z, pi)?;
        }
        Ok((z, x_hat))
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let c = tape.value(x).cols();
        if c != self.d_model {
            return Err(Error::Shape {
                op: "gate",
                detail: format!("input width {} vs d_model {}", c, self.d_model),
            });
        }
        Ok(())
    }

    /// One gate evaluation: advances `state` with `x_t` (when β is on) and
    /// returns `(gate, x̂_{t+1})`.
    pub fn step(&self, tape: &mut Tape, state: &mut RouterState, x_t: Var) -> Result<(Var, Option<Var>)> {
        self.check_width(tape, x_t)?;
        let s = if let Some(beta) = self.beta {
            let input = if self.membrane() { self.w.apply(tape, x_t)? } else { x_t };
            Some(beta_step(tape, state, input, beta, self.config.beta_variant, self.config.membrane_theta)?)
        } else {
            None
        };
        let (z, x_hat) = self.compose(tape, x_t, s, None)?;
        Ok((tape.softmax(z), x_hat))
    }

    /// Gates for a whole batch of sequences. `xs` is `[steps·batch, d_model]`
    /// with row `t·batch + b` holding step `t` of sequence `b`; the state is
    /// reset at step 0.
    pub fn forward(&self, tape: &mut Tape, xs: Var, batch: usize) -> Result<RouteTrace> {
        self.forward_with(tape, xs, batch, None)
    }

    /// [`forward`](Self::forward) on `xs = table[index]`. Per-row work of the
    /// predictor's input half is done on the table, which is cheaper when the
    /// table is much shorter than the index.
    pub fn forward_indexed(&self, tape: &mut Tape, table: Var, index: &[usize], batch: usize) -> Result<RouteTrace> {
        self.check_width(tape, table)?;
        let xs = tape.gather_rows(table, index)?;
        let x_proj = match (&self.predictor, self.config.use_ant && !self.membrane()) {
            (Some(p), true) => {
                let per_row = p.input_projection(tape, table)?;
                Some(tape.gather_rows(per_row, index)?)
            }
            _ => None,
        };
        self.forward_with(tape, xs, batch, x_proj)
    }

    fn forward_with(&self, tape: &mut Tape, xs: Var, batch: usize, x_proj: Option<Var>) -> Result<RouteTrace> {
        self.check_width(tape, xs)?;
        let rows = tape.value(xs).rows();
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Shape {
                op: "gate",
                detail: format!("{rows} rows is not a multiple of batch {batch}"),
            });
        }
        let steps = rows / batch;
        let states = match self.beta {
            Some(beta) => {
                let drive = if self.membrane() { self.w.apply(tape, xs)? } else { xs };
                let mut st = self.init_state(tape, batch);
                let mut hs = Vec::with_capacity(steps);
                for t in 0..steps {
                    let x_t = tape.slice_rows(drive, t * batch, batch)?;
                    hs.push(beta_step(tape, &mut st, x_t, beta, self.config.beta_variant, self.config.membrane_theta)?);
                }
                Some(if hs.len() == 1 { hs[0] } else { tape.concat_rows(&hs)? })
            }
            None => None,
        };
        let (logits, x_hat) = self.compose(tape, xs, states, x_proj)?;
        let gates = tape.softmax(logits);
        Ok(RouteTrace {
            logits,
            gates,
            states,
            x_hat,
            steps,
            batch,
        })
    }
}

/// `routing + λ·pred`; without a prediction term the routing loss is returned
/// unchanged.
pub fn combined_loss(tape: &mut Tape, routing: Var, pred: Option<Var>, lambda_pred: f64) -> Result<Var> {
    if lambda_pred < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda_pred must be non-negative, got {lambda_pred}")));
    }
    match pred {
        None => Ok(routing),
        Some(p) => {
            let scaled = tape.scale(p, lambda_pred);
            tape.add(routing, scaled)
        }
    }
}
