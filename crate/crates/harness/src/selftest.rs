//! In-process gradient checks and invariants, runnable from the CLI.
//!
//! Inputs are drawn from fixed seeds so every invocation checks the same
//! cases.

use route_lab_core::autodiff::gradcheck::{self, GradCheck};
use route_lab_core::autodiff::{AdamState, ParamStore, Rng, Tape, Tensor, Var};
use route_lab_core::metrics::argmax;
use route_lab_core::routing::{combined_loss, coverage_k, GateConfig, PiMode, PrecisionTracker, PredictorIntegration, Router};
use route_lab_core::tasks::{generate, TaskSpec};
use route_lab_core::Result;

/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gaussian()).collect()).expect("shape matches data")
}

/// Keeps relu's kink out of the finite-difference stencil.
fn away_from_zero(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    random(rng, rows, cols).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(x).dims2();
    let w = tape.constant(random(&mut Rng::new(seed), r, c));
    let p = tape.mul(x, w)?;
    Ok(tape.mean(p))
}

fn grad_result(name: &str, r: Result<GradCheck>) -> SelfCheck {
    match r {
        Ok(g) => SelfCheck {
            name: format!("gradient {name}"),
            passed: g.checked > 0 && g.max_rel_err <= GRAD_TOL,
            detail: format!("max rel err {:.2e} over {} elements{}", g.max_rel_err, g.checked, if g.worst.is_empty() { String::new() } else { format!(" (worst at {})", g.worst) }),
        },
        Err(e) => SelfCheck {
            name: format!("gradient {name}"),
            passed: false,
            detail: e.to_string(),
        },
    }
}

type OpCase = (&'static str, Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = Rng::new(101);
    let mut r = |a, b| random(&mut rng, a, b);
    let (m34, m42, m43, m23) = (r(3, 4), r(4, 2), r(4, 3), r(2, 3));
    let (row, col, one, m42b, m43b) = (r(1, 4), r(3, 1), r(1, 1), r(4, 2), r(4, 3));
    let kinked = away_from_zero(&mut Rng::new(102), 3, 5);
    vec![
        ("matmul", vec![m34.clone(), m42], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        }),
        ("add/sub/mul broadcast", vec![m34.clone(), row, col, one], |t, v| {
            let x = t.add(v[0], v[1])?;
            let x = t.mul(x, v[2])?;
            let x = t.sub(x, v[3])?;
            let x = t.mul(x, v[0])?;
            weighted_sum(t, x, 2)
        }),
        ("scale/add_scalar", vec![m23.clone()], |t, v| {
            let x = t.scale(v[0], -1.7);
            let x = t.add_scalar(x, 0.3);
            weighted_sum(t, x, 3)
        }),
        ("sigmoid", vec![kinked.clone()], |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, 4)
        }),
        ("relu", vec![kinked.clone()], |t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 5)
        }),
        ("gelu", vec![kinked.clone()], |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, 6)
        }),
        ("softmax", vec![kinked], |t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, 7)
        }),
        ("concat_cols", vec![m43.clone(), m42b], |t, v| {
            let y = t.concat_cols(&[v[0], v[1], v[0]])?;
            weighted_sum(t, y, 8)
        }),
        ("concat_rows", vec![m43.clone(), m23], |t, v| {
            let y = t.concat_rows(&[v[1], v[0]])?;
            weighted_sum(t, y, 9)
        }),
        ("slice_rows/column", vec![m43.clone()], |t, v| {
            let s = t.slice_rows(v[0], 1, 2)?;
            let s = t.mul(s, s)?;
            let c = t.column(v[0], 2)?;
            let a = weighted_sum(t, s, 10)?;
            let b = weighted_sum(t, c, 11)?;
            t.add(a, b)
        }),
        ("gather_rows", vec![m43.clone()], |t, v| {
            let y = t.gather_rows(v[0], &[3, 0, 3, 1, 3])?;
            weighted_sum(t, y, 12)
        }),
        ("mean", vec![m43.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.mean(y))
        }),
        ("mse", vec![m43.clone(), m43b], |t, v| t.mse(v[0], v[1])),
        ("cross_entropy", vec![m43.clone()], |t, v| t.cross_entropy(v[0], &[2, 0, 1, 1])),
        ("weighted_cross_entropy", vec![m43], |t, v| t.weighted_cross_entropy(v[0], &[2, 0, 1, 1], &[1.0, 5.0, 1.0, 0.5])),
    ]
}

fn gate_loss(router: &Router, store: &ParamStore, tape: &mut Tape, xs: &Tensor, batch: usize) -> Result<Var> {
    let bound = router.bind(tape, store)?;
    let x = tape.constant(xs.clone());
    let trace = bound.forward(tape, x, batch)?;
    let routing = weighted_sum(tape, trace.gates, 22)?;
    match trace.x_hat {
        Some(x_hat) => {
            let target = tape.constant(Tensor::full(tape.value(x_hat).shape(), 0.3));
            let pred = tape.mse(x_hat, target)?;
            combined_loss(tape, routing, Some(pred), router.config.lambda_pred)
        }
        None => Ok(routing),
    }
}

fn gate_check(name: &str, config: GateConfig, pi_signal: Option<&[f64]>) -> Result<GradCheck> {
    let (d, n, steps, batch) = (3, 3, 4, 2);
    let mut store = ParamStore::new();
    let mut router = Router::new(&mut store, &mut Rng::for_init(0, name), "r", d, n, config)?;
    if let Some(sig) = pi_signal {
        router.update_precision(sig)?;
    }
    let xs = random(&mut Rng::new(30), steps * batch, d);
    gradcheck::check_params(&store, |s, t| gate_loss(&router, s, t, &xs, batch))
}

fn invariant(name: &str, f: impl FnOnce() -> Result<Option<String>>) -> SelfCheck {
    let (passed, detail) = match f() {
        Ok(None) => (true, "ok".to_string()),
        Ok(Some(why)) => (false, why),
        Err(e) => (false, e.to_string()),
    };
    SelfCheck {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn softmax_normalisation() -> Result<Option<String>> {
    let mut rng = Rng::new(7);
    let mut worst: f64 = 0.0;
    for i in 0..500 {
        let width = 1 + i % 40;
        let scale = [1.0, 30.0, 300.0][i % 3];
        let row: Vec<f64> = (0..width).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&row));
        let s = tape.softmax(x);
        let p = tape.value(s).data();
        if p.iter().any(|v| *v < 0.0) {
            return Ok(Some(format!("negative probability in row {i}")));
        }
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst > 1e-12).then(|| format!("max |Σ softmax − 1| = {worst:e}")))
}

fn beta_open_interval() -> Result<Option<String>> {
    let (d, n, steps, batch) = (4, 2, 6, 8);
    let mut store = ParamStore::new();
    let router = Router::new(&mut store, &mut Rng::new(3), "r", d, n, GateConfig::with(true, false, false))?;
    let mut opt = AdamState::new(&store, 0.5);
    let mut rng = Rng::new(4);
    let labels: Vec<usize> = (0..steps * batch).map(|r| r % n).collect();
    for _ in 0..200 {
        let xs = random(&mut rng, steps * batch, d);
        let mut tape = Tape::new();
        let bound = router.bind(&mut tape, &store)?;
        let x = tape.constant(xs);
        let tr = bound.forward(&mut tape, x, batch)?;
        let loss = tape.cross_entropy(tr.logits, &labels)?;
        let grads = tape.backward(loss)?;
        store.accumulate(&grads);
        opt.step(&mut store)?;
    }
    let beta = router.beta_values(&store).unwrap_or_default();
    Ok(beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)).map(|b| format!("β = {b} after 200 steps at lr 0.5")))
}

fn precision_positive_and_isolated() -> Result<Option<String>> {
    let mut tracker = PrecisionTracker::new(3, PiMode::Mse, 0.95, 1e-4, 0.5);
    let mut rng = Rng::new(9);
    for _ in 0..200 {
        let sig: Vec<f64> = (0..3).map(|_| rng.uniform() * 10f64.powi(rng.below(13) as i32 - 6)).collect();
        tracker.update(&sig)?;
        if let Some(p) = tracker.pi().iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Ok(Some(format!("Π entry {p}")));
        }
    }
    let mut store = ParamStore::new();
    let mut router = Router::new(&mut store, &mut Rng::new(5), "r", 3, 3, GateConfig::with(false, true, false))?;
    router.update_precision(&[0.1, 1.0, 4.0])?;
    let before = router.pi();
    if store.iter().any(|(_, p)| p.name.contains("pi")) {
        return Ok(Some("Π is registered as a parameter".into()));
    }
    let mut tape = Tape::new();
    let bound = router.bind(&mut tape, &store)?;
    let x = tape.constant(Tensor::full(&[4, 3], 0.7));
    let tr = bound.forward(&mut tape, x, 4)?;
    let loss = tape.cross_entropy(tr.logits, &[0, 1, 2, 0])?;
    let grads = tape.backward(loss)?;
    store.accumulate(&grads);
    AdamState::new(&store, 0.1).step(&mut store)?;
    Ok((router.pi() != before).then(|| "an optimizer step changed Π".into()))
}

fn closed_form() -> Result<Option<String>> {
    let mut rng = Rng::new(11);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let beta = 0.01 + 0.98 * rng.uniform();
        let steps = 6 + case % 25;
        let xs: Vec<f64> = (0..steps).map(|_| 6.0 * rng.uniform() - 3.0).collect();
        let mut store = ParamStore::new();
        let cfg = GateConfig {
            beta_init: beta,
            ..GateConfig::with(true, false, false)
        };
        let router = Router::new(&mut store, &mut Rng::new(0), "r", 1, 2, cfg)?;
        let mut tape = Tape::new();
        let bound = router.bind(&mut tape, &store)?;
        let x = tape.constant(Tensor::matrix(steps, 1, xs.clone())?);
        let tr = bound.forward(&mut tape, x, 1)?;
        let Some(states) = tr.states else {
            return Ok(Some("β gate returned no hidden states".into()));
        };
        let h = tape.value(states).data();
        let b = router.beta_values(&store).unwrap_or_default()[0];
        for t in 0..steps {
            let exact: f64 = (0..=t).map(|s| b.powi((t - s) as i32) * xs[s]).sum();
            worst = worst.max((h[t] - exact).abs());
        }
    }
    Ok((worst > 1e-10).then(|| format!("max |h − Σ β^(t−s) x_s| = {worst:e}")))
}

fn coverage_monotone() -> Result<Option<String>> {
    let mut prev = usize::MAX;
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        let k = coverage_k(p, 0.01)?.k;
        if k > prev {
            return Ok(Some(format!("K rises from {prev} to {k} at p = {p}")));
        }
        prev = k;
    }
    let mut prev = usize::MAX;
    for i in 1..500 {
        let delta = i as f64 / 1000.0;
        let k = coverage_k(0.3, delta)?.k;
        if k > prev {
            return Ok(Some(format!("K rises as δ loosens at δ = {delta}")));
        }
        prev = k;
    }
    Ok(None)
}

fn bitwise_determinism() -> Result<Option<String>> {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for spec in [
        TaskSpec::early_signal(),
        TaskSpec::domain_switch(),
        TaskSpec::anticipation(),
        TaskSpec::precision_regression(true),
        TaskSpec::char_lm(),
    ] {
        let spec = TaskSpec { batch_size: 8, ..spec };
        for (seed, step) in [(0, 0), (17, 499), (123_456, 999)] {
            let a = generate(&spec, &mut Rng::new(seed), step)?;
            let b = generate(&spec, &mut Rng::new(seed), step)?;
            if bits(&a.inputs) != bits(&b.inputs) || bits(&a.expert_outputs) != bits(&b.expert_outputs) || bits(&a.observed) != bits(&b.observed) || a.tokens != b.tokens || a.routing_labels != b.routing_labels {
                return Ok(Some(format!("{:?} differs between identical draws at seed {seed}", spec.kind)));
            }
        }
    }
    Ok(None)
}

fn argmax_ties() -> Result<Option<String>> {
    let cases: [(&[f64], usize); 4] = [(&[1.0, 3.0, 3.0], 1), (&[2.0, 2.0, 2.0], 0), (&[-1.0, -5.0, -1.0], 0), (&[0.0, 0.5, 0.25, 0.5], 1)];
    Ok(cases
        .iter()
        .find(|(row, want)| argmax(row) != *want)
        .map(|(row, want)| format!("argmax({row:?}) = {}, expected {want}", argmax(row))))
}

/// Runs every check. Gradient checks come first, then invariants.
pub fn run() -> Vec<SelfCheck> {
    let mut out: Vec<SelfCheck> = op_cases().into_iter().map(|(name, inputs, f)| grad_result(name, gradcheck::check_inputs(&inputs, f))).collect();
    let additive = GateConfig {
        predictor_integration: PredictorIntegration::Additive,
        ..GateConfig::with(true, false, true)
    };
    let gates: [(&str, GateConfig, Option<&[f64]>); 5] = [
        ("gate β", GateConfig::with(true, false, false), None),
        ("gate Π", GateConfig::with(false, true, false), Some(&[0.2, 1.0, 3.0])),
        ("gate Ant", GateConfig::with(false, false, true), None),
        ("gate β+Ant additive", additive, None),
        ("gate β+Π+Ant", GateConfig::with(true, true, true), Some(&[0.5, 0.1, 2.0])),
    ];
    for (name, cfg, sig) in gates {
        out.push(grad_result(name, gate_check(name, cfg, sig)));
    }
    out.push(invariant("softmax normalisation ≤ 1e-12", softmax_normalisation));
    out.push(invariant("β stays in (0, 1)", beta_open_interval));
    out.push(invariant("Π positive and isolated from gradients", precision_positive_and_isolated));
    out.push(invariant("hidden state matches closed form ≤ 1e-10", closed_form));
    out.push(invariant("coverage K monotone", coverage_monotone));
    out.push(invariant("task generators bitwise deterministic", bitwise_determinism));
    out.push(invariant("argmax takes lowest tied index", argmax_ties));
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_self_check_passes() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
