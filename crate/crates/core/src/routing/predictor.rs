use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundLinear, Linear, ParamStore, Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Next-input predictor `x̂_{t+1} = f(x_t, h_t)`: `2d → 4d → GELU → d`, plus
/// the bias-free correction map `W_pred: d → N` used by the additive gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictor {
    pub fc1: Linear,
    pub fc2: Linear,
    pub w_pred: Option<Linear>,
    pub d_model: usize,
}

impl Predictor {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, n_experts: usize, with_w_pred: bool) -> Self {
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), 2 * d_model, 4 * d_model, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), 4 * d_model, d_model, true);
        let w_pred = with_w_pred.then(|| Linear::new(store, rng, &format!("{name}.w_pred"), d_model, n_experts, false));
        Self { fc1, fc2, w_pred, d_model }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundPredictor {
        BoundPredictor {
            fc1: self.fc1.bind(tape, store),
            fc2: self.fc2.bind(tape, store),
            w_pred: self.w_pred.map(|l| l.bind(tape, store)),
            d_model: self.d_model,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundPredictor {
    pub fc1: BoundLinear,
    pub fc2: BoundLinear,
    pub w_pred: Option<BoundLinear>,
    pub d_model: usize,
}

impl BoundPredictor {
    /// MLP on `concat(x, h)`; `h = None` is the stateless form, which feeds
    /// zeros in the state slot.
    pub fn predict_next(&self, tape: &mut Tape, x: Var, h: Option<Var>) -> Result<Var> {
        let h = match h {
            Some(h) => h,
            None => {
                let rows = tape.value(x).rows();
                tape.constant(Tensor::zeros(&[rows, self.d_model]))
            }
        };
        let xh = tape.concat_cols(&[x, h])?;
        let a = self.fc1.apply(tape, xh)?;
        let a = tape.gelu(a);
        self.fc2.apply(tape, a)
    }

    /// The `x` half of the first layer, `x · W1[..d]`. Inputs drawn from a
    /// small table can be projected once per row and gathered.
    pub fn input_projection(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w_x = tape.slice_rows(self.fc1.w, 0, self.d_model)?;
        tape.matmul(x, w_x)
    }

    /// Same as [`predict_next`](Self::predict_next) given `input_projection(x)`.
    pub fn predict_from_projection(&self, tape: &mut Tape, x_proj: Var, h: Option<Var>) -> Result<Var> {
        let mut a = x_proj;
        if let Some(h) = h {
            let w_h = tape.slice_rows(self.fc1.w, self.d_model, self.d_model)?;
            let from_h = tape.matmul(h, w_h)?;
            a = tape.add(a, from_h)?;
        }
        if let Some(b) = self.fc1.b {
            a = tape.add(a, b)?;
        }
        let a = tape.gelu(a);
        self.fc2.apply(tape, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let p = Predictor::new(&mut store, &mut rng, "p", 3, 2, true);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let bp = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let h = tape.constant(Tensor::row(&[5.0, 5.0, 5.0]));
        let y = bp.predict_next(&mut tape, x, Some(h)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stateless_equals_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let p = Predictor::new(&mut store, &mut rng, "p", 2, 2, false);
        let mut tape = Tape::new();
        let bp = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::row(&[0.3, -0.7]));
        let z = tape.constant(Tensor::row(&[0.0, 0.0]));
        let a = bp.predict_next(&mut tape, x, None).unwrap();
        let b = bp.predict_next(&mut tape, x, Some(z)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }
}
