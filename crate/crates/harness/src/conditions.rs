use serde::{Deserialize, Serialize};

use route_lab_core::models::{InputView, LmConfig};
use route_lab_core::routing::{BetaVariant, GateConfig, PiMode};
use route_lab_core::tasks::TaskSpec;

use crate::config::{ExperimentConfig, ExperimentId};
use crate::HarnessError;

/// What to build and train for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plan {
    Toy { spec: TaskSpec, gate: GateConfig, view: InputView },
    Precision { spec: TaskSpec, gate: GateConfig },
    Lm { spec: TaskSpec, model: LmConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub plan: Plan,
}

impl Condition {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let (spec, gate) = match &self.plan {
            Plan::Toy { spec, gate, .. } | Plan::Precision { spec, gate } => (spec, gate),
            Plan::Lm { spec, model } => (spec, &model.gate),
        };
        spec.validate()?;
        gate.validate()?;
        Ok(())
    }

    pub fn spec(&self) -> &TaskSpec {
        match &self.plan {
            Plan::Toy { spec, .. } | Plan::Precision { spec, .. } | Plan::Lm { spec, .. } => spec,
        }
    }
}

/// Table 1 model names, in table order.
pub const TABLE1_MODELS: [&str; 4] = ["last_token", "mean_pool", "fixed_beta", "learned_beta"];
/// Table 1 task prefixes.
pub const TABLE1_TASKS: [&str; 2] = ["task_a", "task_b"];
/// Ablation rows, in table order. `none` is the empty mechanism subset.
pub const ABLATION_ROWS: [&str; 10] = ["baseline", "none", "beta", "pi", "ant", "beta+pi", "beta+ant", "pi+ant", "beta+pi+ant", "oracle"];
pub const TABLE4_ROWS: [&str; 4] = ["baseline", "ant", "beta+ant", "oracle"];
pub const TABLE2_ROWS: [&str; 4] = ["static/affinity", "static/precision", "shifting/affinity", "shifting/precision"];
pub const LM_ROWS: [&str; 3] = ["standard", "beta", "beta+ant"];

fn with_batch(spec: TaskSpec, cfg: &ExperimentConfig) -> TaskSpec {
    TaskSpec {
        batch_size: cfg.batch_size,
        ..spec
    }
}

fn table1(cfg: &ExperimentConfig) -> Vec<Condition> {
    let mut out = Vec::new();
    for task in TABLE1_TASKS {
        let (spec, beta_init) = match task {
            "task_a" => (TaskSpec::early_signal(), 0.9),
            _ => (TaskSpec::domain_switch(), 0.75),
        };
        let spec = with_batch(spec, cfg);
        let lif = |learn_beta| GateConfig {
            beta_variant: BetaVariant::PerExpertMembraneCap,
            beta_init,
            learn_beta,
            ..GateConfig::with(true, false, false)
        };
        for model in TABLE1_MODELS {
            let (gate, view) = match model {
                "last_token" => (GateConfig::baseline(), InputView::Current),
                "mean_pool" => (GateConfig::baseline(), InputView::MeanPool),
                "fixed_beta" => (lif(false), InputView::Current),
                _ => (lif(true), InputView::Current),
            };
            out.push(Condition {
                name: format!("{task}/{model}"),
                plan: Plan::Toy {
                    spec: spec.clone(),
                    gate,
                    view,
                },
            });
        }
    }
    out
}

fn precision(cfg: &ExperimentConfig, rows: &[&str]) -> Vec<Condition> {
    rows.iter()
        .map(|row| {
            let (setting, router) = row.split_once('/').expect("row names are setting/router");
            let spec = with_batch(TaskSpec::precision_regression(setting == "shifting"), cfg);
            let gate = if router == "precision" { GateConfig::with(false, true, false) } else { GateConfig::baseline() };
            Condition {
                name: row.to_string(),
                plan: Plan::Precision { spec, gate },
            }
        })
        .collect()
}

/// Gate for an ablation row; Π tracks routing correctness on this task.
pub fn ablation_gate(row: &str) -> Option<(GateConfig, InputView)> {
    let (gate, view) = match row {
        "baseline" | "none" => (GateConfig::baseline(), InputView::Current),
        "oracle" => (GateConfig::baseline(), InputView::Next),
        _ => {
            let parts: Vec<&str> = row.split('+').collect();
            if parts.iter().any(|p| !matches!(*p, "beta" | "pi" | "ant")) {
                return None;
            }
            let has = |m| parts.contains(&m);
            (GateConfig::with(has("beta"), has("pi"), has("ant")), InputView::Current)
        }
    };
    Some((
        GateConfig {
            pi_mode: PiMode::Correctness,
            ..gate
        },
        view,
    ))
}

fn anticipation(cfg: &ExperimentConfig, rows: &[&str]) -> Vec<Condition> {
    let spec = with_batch(TaskSpec::anticipation(), cfg);
    rows.iter()
        .map(|row| {
            let (gate, view) = ablation_gate(row).expect("known ablation row");
            Condition {
                name: row.to_string(),
                plan: Plan::Toy {
                    spec: spec.clone(),
                    gate,
                    view,
                },
            }
        })
        .collect()
}

fn lm(cfg: &ExperimentConfig) -> Vec<Condition> {
    let spec = with_batch(TaskSpec::char_lm(), cfg);
    LM_ROWS
        .iter()
        .map(|row| {
            let model = match *row {
                "standard" => LmConfig::standard(),
                "beta" => LmConfig::beta(),
                _ => LmConfig::beta_ant(),
            };
            Condition {
                name: row.to_string(),
                plan: Plan::Lm { spec: spec.clone(), model },
            }
        })
        .collect()
}

/// Conditions an experiment trains, in report order.
pub fn conditions(cfg: &ExperimentConfig) -> Vec<Condition> {
    match cfg.experiment {
        ExperimentId::Table1 => table1(cfg),
        ExperimentId::Table2 => precision(cfg, &TABLE2_ROWS),
        ExperimentId::Table3 => precision(cfg, &["shifting/precision"]),
        ExperimentId::Table4 => anticipation(cfg, &TABLE4_ROWS),
        ExperimentId::Ablation => anticipation(cfg, &ABLATION_ROWS),
        ExperimentId::Lm => lm(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_counts() {
        let n = |e| conditions(&ExperimentConfig::new(e)).len();
        assert_eq!(n(ExperimentId::Table1), 8);
        assert_eq!(n(ExperimentId::Table2), 4);
        assert_eq!(n(ExperimentId::Table3), 1);
        assert_eq!(n(ExperimentId::Table4), 4);
        assert_eq!(n(ExperimentId::Ablation), 10);
        assert_eq!(n(ExperimentId::Lm), 3);
    }

    #[test]
    fn all_conditions_validate() {
        for e in ExperimentId::ALL {
            ExperimentConfig::new(e).validate().unwrap();
        }
    }

    #[test]
    fn ablation_rows_map_to_subsets() {
        let (g, v) = ablation_gate("beta+pi+ant").unwrap();
        assert!(g.use_beta && g.use_pi && g.use_ant);
        assert_eq!(g.pi_mode, PiMode::Correctness);
        assert_eq!(v, InputView::Current);
        assert_eq!(ablation_gate("oracle").unwrap().1, InputView::Next);
        assert!(ablation_gate("beta+gamma").is_none());
    }
}
