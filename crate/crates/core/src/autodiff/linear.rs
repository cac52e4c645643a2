use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x W + b` on row vectors. `W` is `[fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Gaussian weights with std `1/sqrt(fan_in)`; bias starts at zero.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), rng.init_matrix(fan_in, fan_out));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            w: tape.param(store, self.w),
            b: self.b.map(|b| tape.param(store, b)),
        }
    }
}

/// A [`Linear`] whose parameters are already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Option<Var>,
}

impl BoundLinear {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}
