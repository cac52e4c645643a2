//! Trainable assemblies built on the routing gates: toy routers trained on
//! expert labels, a gate over fixed oracle experts, and a character-level
//! mixture-of-experts language model.

mod checkpoint;
mod lm;
mod precision;
mod toy;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lm::{
    evaluate_lm, identify_domain_expert, lm_forward, lm_forward_with, train_lm, CharMoELM, Expert, GateTrace, LmConfig, LmEval, LmOutput,
    LmTrainConfig, MID_WINDOW,
};
pub use precision::{expert_mse, precision_forward, train_precision, PrecisionRouter, PrecisionTrainConfig};
pub use toy::{to_sequence_major, toy_forward, train_toy, transition_step, InputView, ToyOutput, ToyRouter, ToyTrainConfig};
