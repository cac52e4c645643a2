use proptest::prelude::*;

use route_lab_core::autodiff::{logit, AdamState, ParamStore, Rng, Tape, Tensor};
use route_lab_core::metrics::argmax;
use route_lab_core::routing::{coverage_k, GateConfig, PiMode, PrecisionTracker, Router};
use route_lab_core::tasks::{generate, TaskSpec};

fn softmax_row(tape: &mut Tape, row: &[f64]) -> Vec<f64> {
    let x = tape.constant(Tensor::row(row));
    let s = tape.softmax(x);
    tape.value(s).data().to_vec()
}

fn tiny(spec: TaskSpec) -> TaskSpec {
    TaskSpec { batch_size: 5, ..spec }
}

fn all_tasks() -> Vec<TaskSpec> {
    vec![
        tiny(TaskSpec::early_signal()),
        tiny(TaskSpec::domain_switch()),
        tiny(TaskSpec::anticipation()),
        tiny(TaskSpec::precision_regression(true)),
        tiny(TaskSpec::char_lm()),
    ]
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Gates of a gate over `xs` (`[T·B, d]`), as plain values.
fn gates(router: &Router, store: &ParamStore, xs: &Tensor, batch: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = router.bind(&mut tape, store).unwrap();
    let x = tape.constant(xs.clone());
    let tr = bound.forward(&mut tape, x, batch).unwrap();
    tape.value(tr.gates).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_sums_to_one(row in prop::collection::vec(-300.0f64..300.0, 1..40)) {
        let p = softmax_row(&mut Tape::new(), &row);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant_and_permutation_equivariant(
        row in prop::collection::vec(-20.0f64..20.0, 2..12),
        shift in -50.0f64..50.0,
        rot in 0usize..12,
    ) {
        let mut tape = Tape::new();
        let p = softmax_row(&mut tape, &row);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax_row(&mut tape, &shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let k = rot % row.len();
        let mut rotated = row.clone();
        rotated.rotate_left(k);
        let mut expect = p.clone();
        expect.rotate_left(k);
        for (a, b) in expect.iter().zip(softmax_row(&mut tape, &rotated)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn expert_permutation_permutes_gates(seed in 0u64..500, rot in 1usize..4) {
        let (d, n, steps, batch) = (5, 4, 3, 2);
        let mut store = ParamStore::new();
        let router = Router::new(&mut store, &mut Rng::new(seed), "r", d, n, GateConfig::with(true, false, false)).unwrap();
        let xs = Tensor::matrix(steps * batch, d, (0..steps * batch * d).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let before = gates(&router, &store, &xs, batch);
        // Rotate the output columns of W and b.
        let w = store.value(router.w.w).clone();
        let b = store.value(router.w.b.unwrap()).clone();
        let perm = |j: usize| (j + rot) % n;
        let mut w2 = w.clone();
        let mut b2 = b.clone();
        for j in 0..n {
            for i in 0..d {
                w2.data_mut()[i * n + j] = w.at(i, perm(j));
            }
            b2.data_mut()[j] = b.data()[perm(j)];
        }
        *store.value_mut(router.w.w) = w2;
        *store.value_mut(router.w.b.unwrap()) = b2;
        let after = gates(&router, &store, &xs, batch);
        for r in 0..steps * batch {
            for j in 0..n {
                prop_assert!((after[r * n + j] - before[r * n + perm(j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hidden_state_matches_closed_form(
        beta in 0.01f64..0.99,
        xs in prop::collection::vec(-3.0f64..3.0, 6..30),
    ) {
        // d = 1, batch = 1: h_t = Σ_{s≤t} β^{t−s} x_s.
        let steps = xs.len();
        let mut store = ParamStore::new();
        let cfg = GateConfig { beta_init: beta, ..GateConfig::with(true, false, false) };
        let router = Router::new(&mut store, &mut Rng::new(0), "r", 1, 2, cfg).unwrap();
        let mut tape = Tape::new();
        let bound = router.bind(&mut tape, &store).unwrap();
        let x = tape.constant(Tensor::matrix(steps, 1, xs.clone()).unwrap());
        let tr = bound.forward(&mut tape, x, 1).unwrap();
        let h = tape.value(tr.states.unwrap()).data().to_vec();
        let b = router.beta_values(&store).unwrap()[0];
        for t in 0..steps {
            let closed: f64 = (0..=t).map(|s| b.powi((t - s) as i32) * xs[s]).sum();
            prop_assert!((h[t] - closed).abs() <= 1e-10, "t={} h={} closed={}", t, h[t], closed);
        }
    }

    #[test]
    fn vanishing_beta_reduces_to_baseline(seed in 0u64..500) {
        let (d, n, steps, batch) = (4, 3, 5, 2);
        let mut rng = Rng::new(seed + 1000);
        let xs = Tensor::matrix(steps * batch, d, (0..steps * batch * d).map(|_| rng.gaussian()).collect()).unwrap();
        let mut s1 = ParamStore::new();
        let base = Router::new(&mut s1, &mut Rng::new(seed), "r", d, n, GateConfig::baseline()).unwrap();
        let mut s2 = ParamStore::new();
        let with_beta = Router::new(&mut s2, &mut Rng::new(seed), "r", d, n, GateConfig::with(true, false, false)).unwrap();
        let raw = with_beta.beta.as_ref().unwrap().beta_raw;
        s2.value_mut(raw).fill(-30.0);
        let a = gates(&base, &s1, &xs, batch);
        let b = gates(&with_beta, &s2, &xs, batch);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn precision_stays_positive(signals in prop::collection::vec(prop::collection::vec(0.0f64..1e6, 3), 1..50)) {
        let mut tr = PrecisionTracker::new(3, PiMode::Mse, 0.95, 1e-4, 0.5);
        for s in &signals {
            tr.update(s).unwrap();
            prop_assert!(tr.pi().iter().all(|p| p.is_finite() && *p > 0.0));
        }
    }

    #[test]
    fn coverage_is_monotone(p1 in 0.001f64..0.999, p2 in 0.001f64..0.999, d1 in 0.001f64..0.5, d2 in 0.001f64..0.5) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let (a, b) = (coverage_k(lo, 0.01).unwrap(), coverage_k(hi, 0.01).unwrap());
        prop_assert!(a.k >= b.k);
        prop_assert!(a.raw >= b.raw || hi >= 0.99);
        let (strict, loose) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(coverage_k(0.3, strict).unwrap().k >= coverage_k(0.3, loose).unwrap().k);
    }

    #[test]
    fn generators_are_bitwise_deterministic(seed in 0u64..10_000, step in 0u64..1000) {
        for spec in all_tasks() {
            let a = generate(&spec, &mut Rng::new(seed), step).unwrap();
            let b = generate(&spec, &mut Rng::new(seed), step).unwrap();
            prop_assert_eq!(bits(&a.inputs), bits(&b.inputs));
            prop_assert_eq!(bits(&a.expert_outputs), bits(&b.expert_outputs));
            prop_assert_eq!(bits(&a.observed), bits(&b.observed));
            prop_assert_eq!(&a.tokens, &b.tokens);
            prop_assert_eq!(&a.routing_labels, &b.routing_labels);
        }
    }

    #[test]
    fn argmax_takes_lowest_tied_index(row in prop::collection::vec(-5i32..5, 1..20), shift in -100.0f64..100.0) {
        let row: Vec<f64> = row.into_iter().map(f64::from).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = row.iter().position(|v| *v == max).unwrap();
        prop_assert_eq!(argmax(&row), first);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift.round()).collect();
        prop_assert_eq!(argmax(&shifted), first);
    }
}

#[test]
fn beta_stays_in_open_unit_interval_after_training() {
    let (d, n, steps, batch) = (4, 2, 6, 8);
    let mut store = ParamStore::new();
    let cfg = GateConfig::with(true, false, false);
    let router = Router::new(&mut store, &mut Rng::new(3), "r", d, n, cfg).unwrap();
    let mut opt = AdamState::new(&store, 0.5);
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let xs = Tensor::matrix(steps * batch, d, (0..steps * batch * d).map(|_| rng.gaussian()).collect()).unwrap();
        let labels: Vec<usize> = (0..steps * batch).map(|r| r % n).collect();
        let mut tape = Tape::new();
        let bound = router.bind(&mut tape, &store).unwrap();
        let x = tape.constant(xs);
        let tr = bound.forward(&mut tape, x, batch).unwrap();
        let loss = tape.cross_entropy(tr.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
        opt.step(&mut store).unwrap();
    }
    for b in router.beta_values(&store).unwrap() {
        assert!(b > 0.0 && b < 1.0, "beta {b}");
    }
}

#[test]
fn precision_is_isolated_from_gradients() {
    let (d, n, batch) = (3, 3, 4);
    let mut store = ParamStore::new();
    let mut router = Router::new(&mut store, &mut Rng::new(5), "r", d, n, GateConfig::with(false, true, false)).unwrap();
    router.update_precision(&[0.1, 1.0, 4.0]).unwrap();
    let pi_before = router.pi().unwrap();
    let n_params = store.len();
    assert!(store.iter().all(|(_, p)| !p.name.contains("pi")), "precision must not be a parameter");

    let mut tape = Tape::new();
    let bound = router.bind(&mut tape, &store).unwrap();
    let x = tape.constant(Tensor::full(&[batch, d], 0.7));
    let tr = bound.forward(&mut tape, x, batch).unwrap();
    let loss = tape.cross_entropy(tr.logits, &[0, 1, 2, 0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    store.accumulate(&grads);
    AdamState::new(&store, 0.1).step(&mut store).unwrap();

    assert_eq!(store.len(), n_params);
    assert_eq!(router.pi().unwrap(), pi_before);
    assert!(grads.param(router.w.w).unwrap().data().iter().any(|g| *g != 0.0));
}

#[test]
fn precision_scales_logits() {
    // With W = 0 the logits are b ⊙ Π, so the gate favours the most precise expert.
    let mut store = ParamStore::new();
    let mut router = Router::new(&mut store, &mut Rng::new(6), "r", 2, 3, GateConfig::with(false, true, false)).unwrap();
    store.value_mut(router.w.w).fill(0.0);
    *store.value_mut(router.w.b.unwrap()) = Tensor::row(&[1.0, 1.0, 1.0]);
    for _ in 0..50 {
        router.update_precision(&[2.0, 0.05, 1.0]).unwrap();
    }
    let g = gates(&router, &store, &Tensor::full(&[1, 2], 1.0), 1);
    assert_eq!(argmax(&g), 1);
    let pi = router.pi().unwrap();
    let logits: Vec<f64> = pi.iter().map(|p| p * 1.0).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (gi, li) in g.iter().zip(&logits) {
        assert!((gi - li.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn beta_initialisation_round_trips() {
    let mut store = ParamStore::new();
    let cfg = GateConfig { beta_init: 0.75, ..GateConfig::with(true, false, false) };
    let router = Router::new(&mut store, &mut Rng::new(0), "r", 8, 2, cfg).unwrap();
    for b in router.beta_values(&store).unwrap() {
        assert!((b - 0.75).abs() < 1e-12);
    }
    assert!((logit(0.75) - 3f64.ln()).abs() < 1e-12);
}
