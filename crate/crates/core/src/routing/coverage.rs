use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expert count needed so that top-K inclusion of the correct expert has
/// probability at least `1 − δ`, assuming independent draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// `ceil(ln δ / ln(1 − p))`, or 1 once `p ≥ 1 − δ`.
    pub k: usize,
    /// The unrounded threshold `ln δ / ln(1 − p)`; 0 when `p = 1`.
    pub raw: f64,
}

impl Coverage {
    /// Raw threshold floored at one expert.
    pub fn real(&self) -> f64 {
        self.raw.max(1.0)
    }
}

pub fn coverage_k(p_correct: f64, delta: f64) -> Result<Coverage> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(p_correct > 0.0) {
        return Err(Error::CoverageUnachievable(p_correct));
    }
    if p_correct >= 1.0 {
        return Ok(Coverage { k: 1, raw: 0.0 });
    }
    let raw = delta.ln() / (1.0 - p_correct).ln();
    let k = if p_correct >= 1.0 - delta { 1 } else { (raw.ceil() as usize).max(1) };
    Ok(Coverage { k, raw })
}
