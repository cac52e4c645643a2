//! Accuracy, bits per character, seed aggregation and Π timelines.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Metric names used in [`RunResult::scalars`].
pub mod names {
    pub const ACC_ALL: &str = "acc_all";
    pub const ACC_TRANSITION: &str = "acc_transition";
    pub const EVAL_ACC_ALL: &str = "eval_acc_all";
    pub const EVAL_ACC_TRANSITION: &str = "eval_acc_transition";
    pub const FINAL_ACC: &str = "final_acc";
    pub const EARLY_LOSS: &str = "early_loss";
    pub const FINAL_LOSS: &str = "final_loss";
    pub const BPC_ALL: &str = "bpc_all";
    pub const BPC_TRANSITION: &str = "bpc_transition";
    pub const P_CORRECT_TRANSITION: &str = "p_correct_transition";
    pub const P_CORRECT_MID: &str = "p_correct_mid";
    pub const K99: &str = "k99";
    pub const K99_CEIL: &str = "k99_ceil";
    pub const DOMAIN_EXPERT: &str = "domain_expert";
    pub const H_BLOCK_T4: &str = "h_block_t4";
    pub const H_BLOCK_T5: &str = "h_block_t5";
    pub const BETA_MEAN: &str = "beta_mean";
    pub const CROSSOVER_STEP: &str = "crossover_step";
    pub const PRED_LOSS_EARLY: &str = "pred_loss_early";
    pub const PRED_LOSS_FINAL: &str = "pred_loss_final";
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gate_dims(gates: &Tensor, labels: &[Option<usize>]) -> Result<(usize, usize, usize)> {
    match gates.shape() {
        &[b, t, n] if b * t == labels.len() => Ok((b, t, n)),
        s => Err(Error::Metric(format!(
            "gates must be [B, T, N] matching {} labels, got {:?}",
            labels.len(),
            s
        ))),
    }
}

/// Fraction of sequences whose gate argmax at `step` equals the label.
/// `gates` is `[B, T, N]`, `labels` is `[B, T]`.
pub fn acc_at(step: usize, gates: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    let (b_n, t_n, n) = gate_dims(gates, labels)?;
    if step >= t_n {
        return Err(Error::Metric(format!("step {step} beyond {t_n} steps")));
    }
    let mut hits = 0usize;
    for b in 0..b_n {
        let label = labels[b * t_n + step].ok_or_else(|| Error::Metric(format!("no label at step {step} for sequence {b}")))?;
        let off = (b * t_n + step) * n;
        if argmax(&gates.data()[off..off + n]) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / b_n as f64)
}

/// Accuracy over every labelled `(sequence, step)` pair.
pub fn acc_all(gates: &Tensor, labels: &[Option<usize>]) -> Result<f64> {
    let (_, _, n) = gate_dims(gates, labels)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            total += 1;
            if argmax(&gates.data()[i * n..(i + 1) * n]) == *l {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Metric("no labelled steps".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Per-step accuracy; `None` where a step has no labels.
pub fn per_step_acc(gates: &Tensor, labels: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
    let (b_n, t_n, _) = gate_dims(gates, labels)?;
    (0..t_n)
        .map(|t| {
            if (0..b_n).all(|b| labels[b * t_n + t].is_some()) {
                acc_at(t, gates, labels).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Cross-entropy of one logit row in nats.
pub fn cross_entropy_nats(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean cross-entropy in bits over the selected steps. `logits` is
/// `[B, T, V]`, `targets` is `[B, T]`.
pub fn bpc(logits: &Tensor, targets: &[usize], steps: &[usize]) -> Result<f64> {
    let (b_n, t_n, v) = match logits.shape() {
        &[b, t, v] if b * t == targets.len() => (b, t, v),
        s => return Err(Error::Metric(format!("logits must be [B, T, V] matching targets, got {s:?}"))),
    };
    if steps.is_empty() || b_n == 0 {
        return Err(Error::Metric("bpc over an empty selection".into()));
    }
    if !logits.is_finite() {
        return Err(Error::Metric("non-finite logits".into()));
    }
    let mut total = 0.0;
    for &t in steps {
        if t >= t_n {
            return Err(Error::Metric(format!("step {t} beyond {t_n} steps")));
        }
        for b in 0..b_n {
            let off = (b * t_n + t) * v;
            total += cross_entropy_nats(&logits.data()[off..off + v], targets[b * t_n + t]);
        }
    }
    Ok(total / (steps.len() * b_n) as f64 / std::f64::consts::LN_2)
}

/// Mean and sample standard deviation (ddof = 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub std: Option<f64>,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Metric("aggregate of no values".into()));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt());
        Ok(Self { mean, std, n })
    }
}

/// Per-seed values of one metric for one condition.
pub type SeedValues = BTreeMap<u64, f64>;

fn same_seeds(a: &SeedValues, b: &SeedValues) -> Result<()> {
    if a.keys().ne(b.keys()) {
        return Err(Error::Metric(format!(
            "seed sets differ: {:?} vs {:?}",
            a.keys().collect::<Vec<_>>(),
            b.keys().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// `condition − baseline` per seed, in seed order.
pub fn paired_deltas(condition: &SeedValues, baseline: &SeedValues) -> Result<Vec<f64>> {
    same_seeds(condition, baseline)?;
    Ok(condition.iter().map(|(s, v)| v - baseline[s]).collect())
}

/// `Δ(both) − Δ(a) − Δ(b)` per seed, every Δ taken against `baseline`.
pub fn interaction(both: &SeedValues, a: &SeedValues, b: &SeedValues, baseline: &SeedValues) -> Result<Vec<f64>> {
    let d_both = paired_deltas(both, baseline)?;
    let d_a = paired_deltas(a, baseline)?;
    let d_b = paired_deltas(b, baseline)?;
    Ok(d_both.iter().zip(&d_a).zip(&d_b).map(|((x, y), z)| x - y - z).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedAggregate {
    pub value: Aggregate,
    pub delta: Aggregate,
}

/// Aggregate of a condition plus its paired delta against `baseline`.
pub fn aggregate(condition: &SeedValues, baseline: &SeedValues) -> Result<PairedAggregate> {
    let values: Vec<f64> = condition.values().copied().collect();
    Ok(PairedAggregate {
        value: Aggregate::of(&values)?,
        delta: Aggregate::of(&paired_deltas(condition, baseline)?)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiRow {
    pub step: usize,
    pub pi: Vec<f64>,
    pub pi0_above_pi2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiTimeline {
    pub rows: Vec<PiRow>,
    /// First step at which Π₀ > Π₂ stops holding after having held.
    pub crossover: Option<usize>,
}

pub const DEFAULT_PI_GRID: [usize; 6] = [490, 500, 510, 520, 550, 600];

/// `trace[s]` is the Π vector in effect at step `s` (after that step's update).
pub fn pi_timeline(trace: &[Vec<f64>], grid: &[usize]) -> Result<PiTimeline> {
    let above = |p: &Vec<f64>| p.len() > 2 && p[0] > p[2];
    let mut rows = Vec::with_capacity(grid.len());
    for &s in grid {
        let pi = trace
            .get(s)
            .ok_or_else(|| Error::Metric(format!("Π trace has {} steps, asked for {}", trace.len(), s)))?;
        rows.push(PiRow {
            step: s,
            pi: pi.clone(),
            pi0_above_pi2: above(pi),
        });
    }
    let crossover = (1..trace.len()).find(|&s| above(&trace[s - 1]) && !above(&trace[s]));
    Ok(PiTimeline { rows, crossover })
}

/// Metrics of one (condition, seed) run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment: String,
    pub condition: String,
    pub seed: u64,
    /// Named scalar metrics, see [`names`].
    pub scalars: BTreeMap<String, f64>,
    /// Per-step accuracy averaged over the reporting window; `None` for
    /// unlabelled steps.
    pub per_step_acc: Vec<Option<f64>>,
    /// Training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Π after each step's update (precision runs).
    pub pi_trace: Vec<Vec<f64>>,
    /// Learned β values at the end of training.
    pub beta: Vec<f64>,
}

impl RunResult {
    pub fn new(experiment: &str, condition: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            condition: condition.into(),
            seed,
            ..Self::default()
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.scalars.get(metric).copied()
    }

    pub fn set(&mut self, metric: &str, value: f64) {
        self.scalars.insert(metric.into(), value);
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.scalars {
            let ok = if k.contains("acc") || k.starts_with("p_correct") {
                (0.0..=1.0).contains(&v)
            } else if k.starts_with("bpc") {
                v >= 0.0
            } else if k.starts_with("k99") {
                v >= 1.0
            } else {
                !v.is_nan()
            };
            if !ok {
                return Err(Error::Metric(format!("{k} = {v} is out of range")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn perfect_gates_score_one() {
        let labels = vec![Some(1), Some(0), Some(2), None];
        let mut g = vec![0.0; 12];
        for (i, l) in labels.iter().enumerate() {
            g[i * 3 + l.unwrap_or(0)] = 1.0;
        }
        let gates = Tensor::new(vec![2, 2, 3], g).unwrap();
        assert_eq!(acc_at(0, &gates, &labels).unwrap(), 1.0);
        assert_eq!(acc_all(&gates, &labels).unwrap(), 1.0);
        assert!(acc_at(1, &gates, &labels).is_err());
    }

    #[test]
    fn uniform_bpc_is_log2_vocab() {
        let logits = Tensor::zeros(&[3, 2, 26]);
        let v = bpc(&logits, &[0, 5, 7, 25, 1, 2], &[0, 1]).unwrap();
        assert_relative_eq!(v, 26f64.log2(), epsilon = 1e-12);
        assert!(bpc(&logits, &[0; 6], &[]).is_err());
    }

    #[test]
    fn aggregate_basics() {
        let a = Aggregate::of(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!((a.mean, a.std), (2.0, Some(0.0)));
        assert_eq!(Aggregate::of(&[1.0]).unwrap().std, None);
        let s = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(s.std.unwrap(), (5.0f64 / 3.0).sqrt());
    }

    #[test]
    fn paired_delta_against_self_is_zero() {
        let v: SeedValues = [(0, 0.3), (1, 0.5)].into_iter().collect();
        let p = aggregate(&v, &v).unwrap();
        assert_eq!((p.delta.mean, p.delta.std), (0.0, Some(0.0)));
        let w: SeedValues = [(0, 0.3), (2, 0.5)].into_iter().collect();
        assert!(paired_deltas(&v, &w).is_err());
    }

    #[test]
    fn timeline_crossover() {
        let trace: Vec<Vec<f64>> = (0..10)
            .map(|s| if s < 6 { vec![10.0, 1.0, 1.0, 1.0] } else { vec![0.5, 1.0, 3.0, 1.0] })
            .collect();
        let tl = pi_timeline(&trace, &[5, 6]).unwrap();
        assert_eq!(tl.crossover, Some(6));
        assert!(tl.rows[0].pi0_above_pi2 && !tl.rows[1].pi0_above_pi2);
        let flat = vec![vec![10.0, 1.0, 1.0, 1.0]; 10];
        assert_eq!(pi_timeline(&flat, &[]).unwrap().crossover, None);
    }
}
