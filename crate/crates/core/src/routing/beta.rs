use serde::{Deserialize, Serialize};

use super::BetaVariant;
use crate::autodiff::{logit, sigmoid, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Learnable decay vector, stored as `beta_raw` so that `β = σ(beta_raw)`
/// always lies in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaMemory {
    pub beta_raw: ParamId,
    pub size: usize,
    pub variant: BetaVariant,
}

impl BetaMemory {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, variant: BetaVariant, beta_init: f64, learnable: bool) -> Self {
        let raw = Tensor::full(&[1, size], logit(beta_init));
        let beta_raw = if learnable {
            store.add(format!("{name}.beta_raw"), raw)
        } else {
            store.add_frozen(format!("{name}.beta_raw"), raw)
        };
        Self { beta_raw, size, variant }
    }

    pub fn beta(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.beta_raw).data().iter().map(|&r| sigmoid(r)).collect()
    }

    /// Records `σ(beta_raw)` on the tape as a `[1, size]` row.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let raw = tape.param(store, self.beta_raw);
        tape.sigmoid(raw)
    }
}

/// Accumulated routing state of a batch of sequences: `h` for the
/// per-dimension variant, the membrane potential `U` for the per-expert one.
#[derive(Debug, Clone, Copy)]
pub struct RouterState {
    pub value: Var,
    pub batch: usize,
    pub width: usize,
}

impl RouterState {
    /// All-zero state, as at the start of every sequence.
    pub fn reset(tape: &mut Tape, batch: usize, width: usize) -> Self {
        Self {
            value: tape.constant(Tensor::zeros(&[batch, width])),
            batch,
            width,
        }
    }
}

/// Advances the state by one step and returns the new value.
///
/// * per-dimension: `h ← β ⊙ h + x_t`
/// * membrane cap:  `U ← β ⊙ U + drive_t − ReLU(U − θ)` where `drive_t` is the
///   routing projection of `x_t` and the cap reads the previous `U`.
pub fn beta_step(tape: &mut Tape, state: &mut RouterState, input: Var, beta: Var, variant: BetaVariant, theta: f64) -> Result<Var> {
    let (r, c) = tape.value(input).dims2();
    if (r, c) != (state.batch, state.width) {
        return Err(Error::Shape {
            op: "beta_step",
            detail: format!("state [{}, {}] vs input [{}, {}]", state.batch, state.width, r, c),
        });
    }
    let decayed = tape.mul(state.value, beta)?;
    let next = match variant {
        BetaVariant::PerDimension => tape.add(decayed, input)?,
        BetaVariant::PerExpertMembraneCap => {
            let over = tape.add_scalar(state.value, -theta);
            let cap = tape.relu(over);
            let driven = tape.add(decayed, input)?;
            tape.sub(driven, cap)?
        }
    };
    state.value = next;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn geometric_sum() {
        let mut store = ParamStore::new();
        let mem = BetaMemory::new(&mut store, "m", 1, BetaVariant::PerDimension, 0.5, true);
        let mut tape = Tape::new();
        let beta = mem.bind(&mut tape, &store);
        let mut st = RouterState::reset(&mut tape, 1, 1);
        let mut hs = Vec::new();
        for _ in 0..3 {
            let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
            let h = beta_step(&mut tape, &mut st, x, beta, BetaVariant::PerDimension, 0.0).unwrap();
            hs.push(tape.value(h).item());
        }
        assert_eq!(hs, vec![1.0, 1.5, 1.75]);
    }

    #[test]
    fn saturation_matches_closed_form() {
        let mut store = ParamStore::new();
        let mem = BetaMemory::new(&mut store, "m", 1, BetaVariant::PerDimension, 0.9, true);
        let mut tape = Tape::new();
        let beta = mem.bind(&mut tape, &store);
        let b = mem.beta(&store)[0];
        let mut st = RouterState::reset(&mut tape, 1, 1);
        let mut prev = 0.0;
        for t in 0..6 {
            let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
            let hv = beta_step(&mut tape, &mut st, x, beta, BetaVariant::PerDimension, 0.0).unwrap();
            let h = tape.value(hv).item();
            assert!(h > prev);
            assert_relative_eq!(h, (1.0 - b.powi(t + 1)) / (1.0 - b), epsilon = 1e-12);
            prev = h;
        }
    }

    #[test]
    fn membrane_cap_subtracts_excess() {
        let mut tape = Tape::new();
        let beta = tape.constant(Tensor::row(&[0.5]));
        let mut st = RouterState {
            value: tape.constant(Tensor::matrix(1, 1, vec![3.0]).unwrap()),
            batch: 1,
            width: 1,
        };
        let x = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let u = beta_step(&mut tape, &mut st, x, beta, BetaVariant::PerExpertMembraneCap, 1.0).unwrap();
        // 0.5 * 3 + 1 - (3 - 1)
        assert_relative_eq!(tape.value(u).item(), 0.5);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut tape = Tape::new();
        let beta = tape.constant(Tensor::row(&[0.5, 0.5]));
        let mut st = RouterState::reset(&mut tape, 1, 2);
        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]));
        assert!(beta_step(&mut tape, &mut st, x, beta, BetaVariant::PerDimension, 0.0).is_err());
    }
}
