//! Pass/fail checks of the reproduced tables against their targets.

use std::fmt;

use route_lab_core::metrics::{self, names, Aggregate};
use route_lab_core::routing::coverage_k;

use crate::config::ExperimentId;
use crate::report::RunSet;
use crate::runner::pi_metric;
use crate::selftest;
use crate::HarnessError;

/// Block-of-h targets for β+Ant at t = 4 and t = 5.
pub const H_BLOCK_TARGET: (f64, f64) = (2.21, 2.56);
pub const H_BLOCK_TOLERANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub description: String,
    pub observed: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub criterion: u8,
    pub title: String,
    pub items: Vec<Item>,
}

impl Check {
    fn new(criterion: u8, title: &str) -> Self {
        Self {
            criterion,
            title: title.to_string(),
            items: Vec::new(),
        }
    }

    fn item(&mut self, description: impl Into<String>, observed: impl Into<String>, passed: bool) {
        self.items.push(Item {
            description: description.into(),
            observed: observed.into(),
            passed,
        });
    }

    fn error(criterion: u8, title: &str, e: HarnessError) -> Self {
        let mut c = Self::new(criterion, title);
        c.item("results available", e.to_string(), false);
        c
    }

    pub fn passed(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|i| i.passed)
    }

    /// One line, then one indented line per item.
    pub fn render(&self) -> String {
        let mut s = format!("criterion {}: {} ... {}", self.criterion, self.title, if self.passed() { "PASS" } else { "FAIL" });
        for i in &self.items {
            s.push_str(&format!("\n    [{}] {}: {}", if i.passed { "ok" } else { "FAIL" }, i.description, i.observed));
        }
        s
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

fn fmt_agg(a: &Aggregate) -> String {
    match a.std {
        Some(s) => format!("{:.4} ± {:.4} (n={})", a.mean, s, a.n),
        None => format!("{:.4} (n=1)", a.mean),
    }
}

fn guarded(criterion: u8, title: &str, f: impl FnOnce(&mut Check) -> Result<(), HarnessError>) -> Check {
    let mut c = Check::new(criterion, title);
    match f(&mut c) {
        Ok(()) => c,
        Err(e) => Check::error(criterion, title, e),
    }
}

pub const TITLES: [&str; 8] = [
    "β routing on the early-signal and domain-switch tasks",
    "precision gating under static and shifting reliability",
    "Π trajectory around the reliability shift",
    "mechanism ablation at the domain transition",
    "coverage bound K(1 − δ)",
    "character-level language model",
    "gradient checks and invariants",
    "hidden-state saturation before the transition",
];

pub fn table1(rs: &RunSet) -> Check {
    guarded(1, TITLES[0], |c| {
        let acc = |cond: &str| rs.agg(cond, names::ACC_ALL);
        let a = acc("task_a/last_token")?;
        c.item("last-token accuracy on task A in [0.40, 0.60]", fmt_agg(&a), (0.40..=0.60).contains(&a.mean));
        let a = acc("task_b/mean_pool")?;
        c.item("mean-pool accuracy on task B in [0.45, 0.55]", fmt_agg(&a), (0.45..=0.55).contains(&a.mean));
        let a = acc("task_a/learned_beta")?;
        c.item("learned-β accuracy on task A ≥ 0.90", fmt_agg(&a), a.mean >= 0.90);
        let a = acc("task_b/learned_beta")?;
        c.item("learned-β accuracy on task B ≥ 0.97", fmt_agg(&a), a.mean >= 0.97);
        let b = rs.agg("task_b/learned_beta", names::BETA_MEAN)?;
        c.item("learned mean β on task B < 0.90", fmt_agg(&b), b.mean < 0.90);
        let b = rs.agg("task_a/learned_beta", names::BETA_MEAN)?;
        c.item("learned mean β on task A > 0.90", fmt_agg(&b), b.mean > 0.90);
        Ok(())
    })
}

pub fn table2(rs: &RunSet) -> Check {
    guarded(2, TITLES[1], |c| {
        let fin = |cond: &str| rs.agg(cond, names::FINAL_LOSS);
        let (sp, sa) = (fin("shifting/precision")?, fin("shifting/affinity")?);
        c.item("shifting: precision final loss ≤ 0.10", fmt_agg(&sp), sp.mean <= 0.10);
        c.item(
            "shifting: affinity final loss ≥ 1.5 × precision",
            format!("{:.4} vs {:.4} (ratio {:.2})", sa.mean, sp.mean, sa.mean / sp.mean),
            sa.mean >= 1.5 * sp.mean,
        );
        let (tp, ta) = (fin("static/precision")?, fin("static/affinity")?);
        c.item("static: precision final loss ≤ affinity", format!("{:.4} vs {:.4}", tp.mean, ta.mean), tp.mean <= ta.mean);
        Ok(())
    })
}

pub fn table3(rs: &RunSet) -> Check {
    guarded(3, TITLES[2], |c| {
        let cond = "shifting/precision";
        let (p0_490, p2_490) = (rs.values(cond, &pi_metric(0, 490))?, rs.values(cond, &pi_metric(2, 490))?);
        let (p0_600, p2_600) = (rs.values(cond, &pi_metric(0, 600))?, rs.values(cond, &pi_metric(2, 600))?);
        let cross = rs.seed_values(cond, names::CROSSOVER_STEP);
        for &s in &rs.seeds {
            c.item(format!("seed {s}: Π0 > Π2 at step 490"), format!("{:.2} vs {:.2}", p0_490[&s], p2_490[&s]), p0_490[&s] > p2_490[&s]);
            match cross.get(&s) {
                Some(x) => c.item(format!("seed {s}: first crossover in [505, 560]"), format!("step {x}"), (505.0..=560.0).contains(x)),
                None => c.item(format!("seed {s}: first crossover in [505, 560]"), "no crossover", false),
            }
            let ratio = p2_600[&s] / p0_600[&s];
            c.item(format!("seed {s}: Π2/Π0 ≥ 5 at step 600"), format!("{ratio:.2}"), ratio >= 5.0);
        }
        Ok(())
    })
}

pub fn ablation(rs: &RunSet) -> Check {
    guarded(4, TITLES[3], |c| {
        let acc = |cond: &str| rs.agg(cond, names::ACC_TRANSITION);
        for cond in ["baseline", "ant", "pi", "pi+ant"] {
            let a = acc(cond)?;
            c.item(format!("{cond} acc@transition ≤ 0.05"), fmt_agg(&a), a.mean <= 0.05);
        }
        let a = acc("beta")?;
        c.item("beta acc@transition in [0.15, 0.45]", fmt_agg(&a), (0.15..=0.45).contains(&a.mean));
        let a = acc("beta+ant")?;
        c.item("beta+ant acc@transition ≥ 0.65", fmt_agg(&a), a.mean >= 0.65);
        let a = acc("oracle")?;
        c.item("oracle acc@transition ≥ 0.98", fmt_agg(&a), a.mean >= 0.98);
        let v = |cond| rs.values(cond, names::ACC_TRANSITION);
        let inter = Aggregate::of(&metrics::interaction(v("beta+ant")?, v("beta")?, v("ant")?, v("none")?)?)?;
        c.item("β × Ant interaction ≥ +0.30", fmt_agg(&inter), inter.mean >= 0.30);
        Ok(())
    })
}

pub fn coverage() -> Check {
    guarded(5, TITLES[4], |c| {
        let low = coverage_k(0.006, 0.01)?;
        c.item("raw K at p = 0.006, δ = 0.01 in [765, 766]", format!("{:.3}", low.raw), (765.0..=766.0).contains(&low.raw));
        let high = coverage_k(0.748, 0.01)?;
        c.item("K at p = 0.748, δ = 0.01 equals 4", high.k.to_string(), high.k == 4);
        Ok(())
    })
}

pub fn lm(rs: &RunSet) -> Check {
    guarded(6, TITLES[5], |c| {
        let a = rs.agg("standard", names::BPC_ALL)?;
        c.item("standard BPC (all) ≤ 2.0", fmt_agg(&a), a.mean <= 2.0);
        let d = Aggregate::of(&rs.deltas("beta", "standard", names::BPC_TRANSITION)?)?;
        c.item("β transition BPC at least 1.5 bits below standard (paired)", fmt_agg(&d), d.mean <= -1.5);
        let a = rs.agg("beta", names::P_CORRECT_MID)?;
        c.item("β pB@mid ≥ 0.95", fmt_agg(&a), a.mean >= 0.95);
        let a = rs.agg("beta+ant", names::P_CORRECT_TRANSITION)?;
        c.item("β+Ant pB@transition ≥ 0.75", fmt_agg(&a), a.mean >= 0.75);
        c.item("β+Ant pB@transition std ≤ 0.10", fmt_agg(&a), a.std.unwrap_or(0.0) <= 0.10);
        let (k, ks) = (rs.agg("beta+ant", names::K99)?, rs.agg("standard", names::K99)?);
        c.item("β+Ant mean K(99%) ≤ 3.5", fmt_agg(&k), k.mean <= 3.5);
        c.item("β+Ant mean K(99%) below standard", format!("{:.2} vs {:.2}", k.mean, ks.mean), k.mean < ks.mean);
        Ok(())
    })
}

pub fn self_test() -> Check {
    let mut c = Check::new(7, TITLES[6]);
    for s in selftest::run() {
        c.item(s.name, s.detail, s.passed);
    }
    c
}

/// Needs a run set that contains the `beta+ant` anticipation condition.
pub fn saturation(rs: &RunSet) -> Check {
    guarded(8, TITLES[7], |c| {
        let (h4, h5) = (rs.values("beta+ant", names::H_BLOCK_T4)?, rs.values("beta+ant", names::H_BLOCK_T5)?);
        for &s in &rs.seeds {
            c.item(format!("seed {s}: h block at t=5 exceeds t=4"), format!("{:.3} vs {:.3}", h5[&s], h4[&s]), h5[&s] > h4[&s]);
        }
        let (m4, m5) = (rs.agg("beta+ant", names::H_BLOCK_T4)?, rs.agg("beta+ant", names::H_BLOCK_T5)?);
        let (t4, t5) = H_BLOCK_TARGET;
        c.item(format!("mean at t=4 within ±{H_BLOCK_TOLERANCE} of {t4}"), fmt_agg(&m4), (m4.mean - t4).abs() <= H_BLOCK_TOLERANCE);
        c.item(format!("mean at t=5 within ±{H_BLOCK_TOLERANCE} of {t5}"), fmt_agg(&m5), (m5.mean - t5).abs() <= H_BLOCK_TOLERANCE);
        Ok(())
    })
}

/// Checks that can be judged from one experiment's runs.
pub fn for_experiment(rs: &RunSet) -> Vec<Check> {
    match rs.experiment {
        ExperimentId::Table1 => vec![table1(rs)],
        ExperimentId::Table2 => vec![table2(rs)],
        ExperimentId::Table3 => vec![table3(rs)],
        ExperimentId::Table4 => vec![saturation(rs)],
        ExperimentId::Ablation => vec![ablation(rs), saturation(rs)],
        ExperimentId::Lm => vec![lm(rs)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coverage_criterion_holds() {
        assert!(coverage().passed(), "{}", coverage());
    }

    #[test]
    fn empty_check_does_not_pass() {
        assert!(!Check::new(1, "x").passed());
    }
}
