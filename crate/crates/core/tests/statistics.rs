//! Sampling statistics of the generators and the coverage bound.

use route_lab_core::autodiff::Rng;
use route_lab_core::routing::coverage_k;
use route_lab_core::tasks::{chain_distribution, gen_char_lm, TaskSpec};

#[test]
fn gaussian_moments() {
    let mut rng = Rng::new(1);
    let n = 1_000_000;
    let xs: Vec<f64> = (0..n).map(|_| rng.gaussian()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
}

#[test]
fn uniform_range_and_mean() {
    let mut rng = Rng::new(2);
    let n = 200_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let u = rng.uniform();
        assert!((0.0..1.0).contains(&u));
        sum += u;
    }
    assert!((sum / n as f64 - 0.5).abs() < 0.005);
}

#[test]
fn categorical_frequencies() {
    let mut rng = Rng::new(3);
    let p = [0.7, 0.15, 0.15];
    let n = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[rng.categorical(&p)] += 1;
    }
    for (c, want) in counts.iter().zip(p) {
        // 4.5 standard errors.
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!((*c as f64 / n as f64 - want).abs() < 4.5 * se, "{counts:?}");
    }
}

#[test]
fn streams_are_independent() {
    let a: Vec<u64> = {
        let mut r = Rng::with_stream(7, 1);
        (0..16).map(|_| r.next_u64()).collect()
    };
    let b: Vec<u64> = {
        let mut r = Rng::with_stream(7, 2);
        (0..16).map(|_| r.next_u64()).collect()
    };
    assert_ne!(a, b);
    assert_ne!(Rng::for_init(0, "beta").next_u64(), Rng::for_init(0, "baseline").next_u64());
}

fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

#[test]
fn chain_matches_its_definition() {
    // Successor with 0.7, skip-one with 0.15, uniform over all 13 with 0.15.
    for prev in 0..13 {
        let p = chain_distribution(prev);
        let mut want = [0.15 / 13.0; 13];
        want[(prev + 1) % 13] += 0.7;
        want[(prev + 2) % 13] += 0.15;
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let p = chain_distribution(0);
    assert!((p[1] - (0.7 + 0.15 / 13.0)).abs() < 1e-15);
    // Independent evaluation of H(0.7115, 0.1615, 11 × 0.01154) in bits.
    let h = entropy_bits(&p);
    assert!((h - 1.591_265).abs() < 1e-6, "entropy {h}");
}

#[test]
fn sampled_chain_frequencies() {
    let spec = TaskSpec { batch_size: 2000, ..TaskSpec::char_lm() };
    let b = gen_char_lm(&spec, &mut Rng::new(11)).unwrap();
    let (mut succ, mut skip, mut total) = (0usize, 0usize, 0usize);
    let mut transitions_in_domain = true;
    for s in 0..b.batch {
        for t in 1..b.steps {
            let (prev, cur) = (b.token(s, t - 1), b.token(s, t));
            if t == spec.switch_step {
                // The first symbol of the second domain is fresh, never a chain step.
                transitions_in_domain &= cur >= 13 && prev < 13;
                continue;
            }
            let (p, c) = (prev % 13, cur % 13);
            assert_eq!(prev / 13, cur / 13);
            total += 1;
            if c == (p + 1) % 13 {
                succ += 1;
            } else if c == (p + 2) % 13 {
                skip += 1;
            }
        }
    }
    assert!(transitions_in_domain);
    let f_succ = succ as f64 / total as f64;
    let f_skip = skip as f64 / total as f64;
    assert!((f_succ - 0.7115).abs() < 0.005, "successor frequency {f_succ}");
    assert!((f_skip - (0.15 + 0.15 / 13.0)).abs() < 0.005, "skip frequency {f_skip}");
}

/// Smallest K with 1 − (1 − p)^K ≥ 1 − δ, by search.
fn coverage_by_search(p: f64, delta: f64) -> usize {
    let mut k = 1;
    while 1.0 - (1.0 - p).powi(k as i32) < 1.0 - delta {
        k += 1;
    }
    k
}

#[test]
fn coverage_agrees_with_search() {
    for p in [0.006, 0.05, 0.2, 0.5, 0.748, 0.8, 0.95, 0.989] {
        let c = coverage_k(p, 0.01).unwrap();
        assert_eq!(c.k, coverage_by_search(p, 0.01), "p={p}");
    }
    let low = coverage_k(0.006, 0.01).unwrap();
    assert!(low.raw > 765.0 && low.raw < 766.0, "{}", low.raw);
    assert_eq!(coverage_k(0.748, 0.01).unwrap().k, 4);
    assert!(coverage_k(0.0, 0.01).is_err());
}

#[test]
fn coverage_holds_under_sampling() {
    // K independent draws that each pick the correct expert with p.
    let mut rng = Rng::new(21);
    let n = 100_000;
    for p in [0.3, 0.748] {
        let k = coverage_k(p, 0.01).unwrap().k as usize;
        let hits = |kk: usize, rng: &mut Rng| (0..n).filter(|_| (0..kk).any(|_| rng.uniform() < p)).count() as f64 / n as f64;
        let at_k = hits(k, &mut rng);
        let below = hits(k - 1, &mut rng);
        assert!(at_k >= 0.99 - 0.002, "p={p} K={k}: {at_k}");
        assert!(below < 0.99, "p={p} K-1: {below}");
    }
}
