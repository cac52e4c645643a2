use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditions::{conditions, Condition};
use crate::HarnessError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "ROUTE_LAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    /// β routing on the early-signal and domain-switch tasks.
    Table1,
    /// Precision gating under static and shifting reliability.
    Table2,
    /// Π trajectory around the reliability shift.
    Table3,
    /// Anticipatory routing.
    Table4,
    /// All mechanism subsets on the anticipation task.
    Ablation,
    /// Character-level mixture-of-experts language model.
    Lm,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [Self::Table1, Self::Table2, Self::Table3, Self::Table4, Self::Ablation, Self::Lm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::Table3 => "table3",
            Self::Table4 => "table4",
            Self::Ablation => "ablation",
            Self::Lm => "lm",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let id = match s.to_ascii_lowercase().as_str() {
            "table1" => Self::Table1,
            "table2" => Self::Table2,
            "table3" => Self::Table3,
            "table4" => Self::Table4,
            "ablation" | "table5" => Self::Ablation,
            "lm" | "table6" => Self::Lm,
            _ => {
                let known: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
                return Err(HarnessError::Invalid(format!("unknown experiment '{s}' (expected one of {})", known.join(", "))));
            }
        };
        Ok(id)
    }
}

/// Everything that determines the outcome of an experiment's runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seeds: Vec<u64>,
    /// Training epochs, or optimizer steps for the precision task.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Trailing epochs averaged for reported training accuracy; leading and
    /// trailing steps for early and final loss.
    pub window: usize,
    /// Held-out evaluation sequences for the toy tasks.
    pub eval_size: usize,
    /// Held-out evaluation batches for the language model.
    pub lm_eval_batches: usize,
    /// `δ` in the `1 − δ` coverage target.
    pub coverage_delta: f64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        let (epochs, batch_size, window) = match experiment {
            ExperimentId::Table1 => (500, 512, 50),
            ExperimentId::Table2 | ExperimentId::Table3 => (1000, 512, 100),
            ExperimentId::Table4 | ExperimentId::Ablation => (800, 512, 50),
            ExperimentId::Lm => (1500, 256, 50),
        };
        Self {
            experiment,
            seeds: (0..5).collect(),
            epochs,
            batch_size,
            lr: 3e-3,
            window,
            eval_size: 4096,
            lm_eval_batches: 16,
            coverage_delta: 0.01,
            out_dir: default_out_dir(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Invalid("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(HarnessError::Invalid("seed list has duplicates".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(HarnessError::Invalid("epochs and batch size must be positive".into()));
        }
        if self.window == 0 || self.window > self.epochs {
            return Err(HarnessError::Invalid(format!("window {} must lie in 1..={}", self.window, self.epochs)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.coverage_delta > 0.0 && self.coverage_delta < 1.0) {
            return Err(HarnessError::Invalid("coverage delta must lie in (0, 1)".into()));
        }
        if self.experiment == ExperimentId::Lm && self.lm_eval_batches == 0 {
            return Err(HarnessError::Invalid("the language model needs at least one evaluation batch".into()));
        }
        for c in conditions(self) {
            c.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 over the configuration and every condition's task and
    /// model settings. Seeds and output paths are excluded: seeds are part of
    /// each record's key.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            experiment: ExperimentId,
            epochs: usize,
            batch_size: usize,
            lr: f64,
            window: usize,
            eval_size: usize,
            lm_eval_batches: usize,
            coverage_delta: f64,
            conditions: &'a [Condition],
        }
        let conds = conditions(self);
        let h = Hashed {
            experiment: self.experiment,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            window: self.window,
            eval_size: self.eval_size,
            lm_eval_batches: self.lm_eval_batches,
            coverage_delta: self.coverage_delta,
            conditions: &conds,
        };
        hex_sha256(&serde_json::to_vec(&h).expect("config serializes"))
    }

    /// Hash of everything that determines one condition's runs. Conditions
    /// shared between experiments hash equal, so their runs can be reused.
    pub fn run_hash(&self, condition: &Condition) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            epochs: usize,
            batch_size: usize,
            lr: f64,
            window: usize,
            eval_size: usize,
            lm_eval_batches: usize,
            coverage_delta: f64,
            condition: &'a Condition,
        }
        let h = Hashed {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            window: self.window,
            eval_size: self.eval_size,
            lm_eval_batches: self.lm_eval_batches,
            coverage_delta: self.coverage_delta,
            condition,
        };
        hex_sha256(&serde_json::to_vec(&h).expect("config serializes"))
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

/// Parses `0,1,2` or `0..5` (half-open).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, HarnessError> {
    let bad = |e: std::num::ParseIntError| HarnessError::Invalid(format!("bad seed list '{s}': {e}"));
    let s = s.trim();
    if s.is_empty() {
        return Err(HarnessError::Invalid("seed list is empty".into()));
    }
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        return Ok((a..b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(bad)).collect()
}
