//! Dense `f64` tensors, a recording tape with reverse-mode gradients, Adam and
//! seeded random streams.

mod adam;
pub mod gradcheck;
mod linear;
pub mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use linear::{BoundLinear, Linear};
pub use rng::Rng;
pub use tape::{logit, sigmoid, Gradients, Param, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;
