//! Synthetic routing tasks with ground-truth expert labels.
//!
//! Toy tasks use two active domains. Domain `k` owns the coordinate block
//! `[k·d/2, (k+1)·d/2)` of the input and its clean pattern is 1.0 on that block
//! and 0 elsewhere. Domains map to experts through `domain_experts`; any other
//! expert is a decoy that is never the correct target.
//!
//! All per-step arrays in a [`Batch`] are sequence-major: element `(b, t)` of a
//! `[B, T]` array sits at `b·T + t`, and inputs are `[B, T, d]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    EarlySignal,
    DomainSwitch,
    PrecisionRegression,
    Anticipation,
    CharLm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d_model: usize,
    pub n_experts: usize,
    pub seq_len: usize,
    pub switch_step: usize,
    pub noise_sigma: f64,
    pub batch_size: usize,
    /// Precision task: experts 0 and 2 trade noise levels from `shift_step` on.
    pub shifting: bool,
    pub shift_step: u64,
    pub vocab_size: usize,
    /// Expert index that is correct for each active domain.
    pub domain_experts: Vec<usize>,
    /// Early-signal task: number of leading tokens carrying the signal.
    pub signal_steps: usize,
    /// Precision task: expert output noise std, indexed `[expert][domain]`.
    pub expert_noise: Vec<Vec<f64>>,
    /// Precision task: std of the noise on the observed regression target.
    pub target_noise: f64,
}

impl TaskSpec {
    fn toy(kind: TaskKind, seq_len: usize, switch_step: usize, noise_sigma: f64) -> Self {
        Self {
            kind,
            d_model: 16,
            n_experts: 4,
            seq_len,
            switch_step,
            noise_sigma,
            batch_size: 512,
            shifting: false,
            shift_step: 500,
            vocab_size: 0,
            domain_experts: vec![0, 2],
            signal_steps: 0,
            expert_noise: Vec::new(),
            target_noise: 0.0,
        }
    }

    pub fn early_signal() -> Self {
        Self {
            signal_steps: 3,
            ..Self::toy(TaskKind::EarlySignal, 8, 0, 1.2)
        }
    }

    pub fn domain_switch() -> Self {
        Self::toy(TaskKind::DomainSwitch, 8, 4, 1.2)
    }

    pub fn anticipation() -> Self {
        Self::toy(TaskKind::Anticipation, 12, 6, 0.8)
    }

    /// Expert reliability is a property of the expert: σ = 0.1, 0.5, 1.5, 0.5
    /// on both domains.
    pub fn precision_regression(shifting: bool) -> Self {
        Self {
            shifting,
            expert_noise: vec![vec![0.1, 0.1], vec![0.5, 0.5], vec![1.5, 1.5], vec![0.5, 0.5]],
            target_noise: 0.25,
            ..Self::toy(TaskKind::PrecisionRegression, 1, 0, 0.0)
        }
    }

    /// Alternative reliability profile where experts 0 and 2 are each reliable
    /// on one domain only. Their batch errors then coincide, so Π cannot tell
    /// them apart.
    pub fn precision_regression_domain_specific(shifting: bool) -> Self {
        Self {
            expert_noise: vec![vec![0.1, 1.5], vec![0.5, 0.5], vec![1.5, 0.1], vec![0.5, 0.5]],
            ..Self::precision_regression(shifting)
        }
    }

    pub fn char_lm() -> Self {
        Self {
            kind: TaskKind::CharLm,
            d_model: 64,
            n_experts: 2,
            seq_len: 64,
            switch_step: 32,
            noise_sigma: 0.0,
            batch_size: 256,
            shifting: false,
            shift_step: 0,
            vocab_size: 26,
            domain_experts: vec![0, 1],
            signal_steps: 0,
            expert_noise: Vec::new(),
            target_noise: 0.0,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.domain_experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        match self.kind {
            TaskKind::DomainSwitch | TaskKind::Anticipation | TaskKind::CharLm if self.switch_step >= self.seq_len => {
                return bad(format!("switch_step {} must be below seq_len {}", self.switch_step, self.seq_len));
            }
            TaskKind::CharLm if self.vocab_size != 26 => return bad("char_lm needs a 26-symbol vocabulary".into()),
            TaskKind::PrecisionRegression if self.expert_noise.len() != self.n_experts => {
                return bad("expert_noise needs one row per expert".into());
            }
            _ => {}
        }
        if self.kind != TaskKind::CharLm {
            let nd = self.n_domains();
            if nd == 0 || self.d_model % nd != 0 {
                return bad(format!("d_model {} is not divisible into {} domain blocks", self.d_model, nd));
            }
            if self.domain_experts.iter().any(|&e| e >= self.n_experts) {
                return bad("domain expert index out of range".into());
            }
        }
        if !(self.noise_sigma >= 0.0) || !(self.target_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    fn block(&self) -> usize {
        self.d_model / self.n_domains()
    }

    /// Clean pattern of `domain`: 1.0 on its block, 0 elsewhere.
    pub fn pattern(&self, domain: usize) -> Vec<f64> {
        let w = self.block();
        (0..self.d_model).map(|i| if i / w == domain { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub kind: TaskKind,
    pub batch: usize,
    pub steps: usize,
    pub d_model: usize,
    pub n_experts: usize,
    /// `[B, T, d]` for toy tasks, empty for the language task.
    pub inputs: Vec<f64>,
    /// `[B, T]` token indices for the language task.
    pub tokens: Vec<usize>,
    /// `[B, T]` domain of each step.
    pub domains: Vec<usize>,
    /// `[B, T]` correct expert where defined.
    pub routing_labels: Vec<Option<usize>>,
    /// Precision task: clean regression target per sequence.
    pub targets: Vec<f64>,
    /// Precision task: noisy observation of the target the loss is taken against.
    pub observed: Vec<f64>,
    /// Precision task: `[B, N]` expert predictions.
    pub expert_outputs: Vec<f64>,
}

impl Batch {
    fn empty(spec: &TaskSpec, steps: usize) -> Self {
        Self {
            kind: spec.kind,
            batch: spec.batch_size,
            steps,
            d_model: spec.d_model,
            n_experts: spec.n_experts,
            inputs: Vec::new(),
            tokens: Vec::new(),
            domains: Vec::with_capacity(spec.batch_size * steps),
            routing_labels: Vec::with_capacity(spec.batch_size * steps),
            targets: Vec::new(),
            observed: Vec::new(),
            expert_outputs: Vec::new(),
        }
    }

    pub fn input(&self, b: usize, t: usize) -> &[f64] {
        let off = (b * self.steps + t) * self.d_model;
        &self.inputs[off..off + self.d_model]
    }

    pub fn label(&self, b: usize, t: usize) -> Option<usize> {
        self.routing_labels[b * self.steps + t]
    }

    pub fn token(&self, b: usize, t: usize) -> usize {
        self.tokens[b * self.steps + t]
    }

    /// Inputs of steps `[from, from + len)` stacked step-major as
    /// `[len·B, d]` rows, the layout the gate consumes.
    pub fn step_major_inputs(&self, from: usize, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len * self.batch * self.d_model);
        for t in from..from + len {
            for b in 0..self.batch {
                out.extend_from_slice(self.input(b, t));
            }
        }
        out
    }
}

fn toy_sequences(spec: &TaskSpec, rng: &mut Rng, signal_at: impl Fn(usize) -> bool, domain_at: impl Fn(usize, usize) -> usize, label_at: impl Fn(usize, usize) -> Option<usize>) -> Result<Batch> {
    spec.validate()?;
    let (b_n, t_n, d) = (spec.batch_size, spec.seq_len, spec.d_model);
    let nd = spec.n_domains();
    let patterns: Vec<Vec<f64>> = (0..nd).map(|k| spec.pattern(k)).collect();
    let mut batch = Batch::empty(spec, t_n);
    batch.inputs.reserve(b_n * t_n * d);
    for _ in 0..b_n {
        let first = rng.below(nd);
        for t in 0..t_n {
            let dom = domain_at(first, t);
            for i in 0..d {
                let clean = if signal_at(t) { patterns[dom][i] } else { 0.0 };
                batch.inputs.push(clean + spec.noise_sigma * rng.gaussian());
            }
            batch.domains.push(dom);
            batch.routing_labels.push(label_at(first, t).map(|k| spec.domain_experts[k]));
        }
    }
    Ok(batch)
}

fn other(first: usize, nd: usize) -> usize {
    (first + 1) % nd
}

/// Domain signal on the first `signal_steps` tokens only; the label is the
/// sequence's domain at the final step.
pub fn gen_early_signal(spec: &TaskSpec, rng: &mut Rng) -> Result<Batch> {
    let last = spec.seq_len - 1;
    let k = spec.signal_steps;
    toy_sequences(spec, rng, |t| t < k, |first, _| first, |first, t| (t == last).then_some(first))
}

/// First domain for steps before `switch_step`, the other domain after; the
/// label is the domain at the final step.
pub fn gen_domain_switch(spec: &TaskSpec, rng: &mut Rng) -> Result<Batch> {
    let (last, sw, nd) = (spec.seq_len - 1, spec.switch_step, spec.n_domains());
    let dom = move |first: usize, t: usize| if t < sw { first } else { other(first, nd) };
    toy_sequences(spec, rng, |_| true, dom, move |first, t| (t == last).then(|| dom(first, t)))
}

/// Same two-block layout as the switch task, but the label at step `t` is the
/// domain of step `t + 1`. The final step has no label.
pub fn gen_anticipation(spec: &TaskSpec, rng: &mut Rng) -> Result<Batch> {
    let (last, sw, nd) = (spec.seq_len - 1, spec.switch_step, spec.n_domains());
    let dom = move |first: usize, t: usize| if t < sw { first } else { other(first, nd) };
    toy_sequences(spec, rng, |_| true, dom, move |first, t| (t < last).then(|| dom(first, t + 1)))
}

/// Noise std per expert for one domain at training step `step`.
pub fn expert_sigma(spec: &TaskSpec, expert: usize, domain: usize, step: u64) -> f64 {
    let e = if spec.shifting && step >= spec.shift_step {
        match expert {
            0 => 2,
            2 => 0,
            e => e,
        }
    } else {
        expert
    };
    spec.expert_noise[e][domain]
}

/// One batch of the regression task at training step `step`. Inputs are
/// `N(0, I)` with no domain signal; the target of domain `k` is the mean of
/// its input block. Experts are fixed noisy oracles of the clean target.
pub fn gen_precision_regression(spec: &TaskSpec, rng: &mut Rng, step: i64) -> Result<Batch> {
    spec.validate()?;
    if step < 0 {
        return Err(Error::InvalidArgument(format!("step must be non-negative, got {step}")));
    }
    let step = step as u64;
    let (b_n, d, n) = (spec.batch_size, spec.d_model, spec.n_experts);
    let nd = spec.n_domains();
    let w = spec.block();
    let mut batch = Batch::empty(spec, 1);
    batch.inputs.reserve(b_n * d);
    batch.expert_outputs.reserve(b_n * n);
    for _ in 0..b_n {
        let dom = rng.below(nd);
        let x: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let target = x[dom * w..(dom + 1) * w].iter().sum::<f64>() / w as f64;
        batch.inputs.extend_from_slice(&x);
        batch.domains.push(dom);
        batch.routing_labels.push(None);
        batch.targets.push(target);
        batch.observed.push(target + spec.target_noise * rng.gaussian());
        for e in 0..n {
            let s = expert_sigma(spec, e, dom, step);
            batch.expert_outputs.push(target + s * rng.gaussian());
        }
    }
    Ok(batch)
}

/// Next symbol of the within-domain chain over 13 symbols.
fn chain_next(prev: usize, rng: &mut Rng) -> usize {
    let u = rng.uniform();
    if u < 0.7 {
        (prev + 1) % 13
    } else if u < 0.85 {
        (prev + 2) % 13
    } else {
        rng.below(13)
    }
}

/// Sequences of symbols 0–12 before `switch_step` and 13–25 from it on. Each
/// domain starts at a uniform symbol and then follows its chain.
pub fn gen_char_lm(spec: &TaskSpec, rng: &mut Rng) -> Result<Batch> {
    spec.validate()?;
    let (b_n, t_n, sw) = (spec.batch_size, spec.seq_len, spec.switch_step);
    let mut batch = Batch::empty(spec, t_n);
    batch.d_model = 0;
    batch.tokens.reserve(b_n * t_n);
    for _ in 0..b_n {
        let mut prev = 0;
        for t in 0..t_n {
            let dom = usize::from(t >= sw);
            let sym = if t == 0 || t == sw { rng.below(13) } else { chain_next(prev, rng) };
            prev = sym;
            batch.tokens.push(sym + 13 * dom);
            batch.domains.push(dom);
            batch.routing_labels.push(None);
        }
    }
    Ok(batch)
}

/// Dispatches on `spec.kind`; `step` only matters for the precision task.
pub fn generate(spec: &TaskSpec, rng: &mut Rng, step: u64) -> Result<Batch> {
    match spec.kind {
        TaskKind::EarlySignal => gen_early_signal(spec, rng),
        TaskKind::DomainSwitch => gen_domain_switch(spec, rng),
        TaskKind::Anticipation => gen_anticipation(spec, rng),
        TaskKind::PrecisionRegression => gen_precision_regression(spec, rng, step as i64),
        TaskKind::CharLm => gen_char_lm(spec, rng),
    }
}

/// Probability of each next symbol given `prev` under the within-domain chain.
pub fn chain_distribution(prev: usize) -> [f64; 13] {
    let mut p = [0.15 / 13.0; 13];
    p[(prev + 1) % 13] += 0.7;
    p[(prev + 2) % 13] += 0.15;
    p
}
