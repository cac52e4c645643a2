//! Table layouts rendered from stored per-seed metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use route_lab_core::metrics::{self, names, Aggregate, SeedValues, DEFAULT_PI_GRID};

use crate::conditions::{conditions, ABLATION_ROWS, LM_ROWS, TABLE1_MODELS, TABLE1_TASKS, TABLE2_ROWS, TABLE4_ROWS};
use crate::config::{ExperimentConfig, ExperimentId};
use crate::runner::pi_metric;
use crate::store::{MetricRow, ResultStore};
use crate::HarnessError;

/// Per-seed metric values of one experiment under one config hash.
#[derive(Debug, Clone)]
pub struct RunSet {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    values: BTreeMap<(String, String), SeedValues>,
}

impl RunSet {
    /// Collects the runs `cfg` describes. Fails with the list of absent
    /// (condition, seed) keys if any run is missing.
    pub fn from_rows(rows: &[MetricRow], cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let hash = cfg.config_hash();
        let exp = cfg.experiment.name();
        let mut values: BTreeMap<(String, String), SeedValues> = BTreeMap::new();
        let mut present = std::collections::BTreeSet::new();
        for r in rows {
            if r.experiment == exp && r.config_hash == hash && cfg.seeds.contains(&r.seed) {
                present.insert((r.condition.clone(), r.seed));
                values.entry((r.condition.clone(), r.metric.clone())).or_default().insert(r.seed, r.value);
            }
        }
        let mut missing = Vec::new();
        for c in conditions(cfg) {
            for &s in &cfg.seeds {
                if !present.contains(&(c.name.clone(), s)) {
                    missing.push(format!("{exp}/{}/seed{s}", c.name));
                }
            }
        }
        if !missing.is_empty() {
            return Err(HarnessError::Missing(missing));
        }
        Ok(Self {
            experiment: cfg.experiment,
            config_hash: hash,
            seeds: cfg.seeds.clone(),
            values,
        })
    }

    pub fn from_store(store: &ResultStore, cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        Self::from_rows(&store.metric_rows(), cfg)
    }

    pub fn values(&self, condition: &str, metric: &str) -> Result<&SeedValues, HarnessError> {
        self.values
            .get(&(condition.to_string(), metric.to_string()))
            .filter(|v| v.len() == self.seeds.len())
            .ok_or_else(|| HarnessError::Missing(vec![format!("{}/{condition}: metric {metric}", self.experiment)]))
    }

    /// Values for whichever seeds recorded `metric`; some metrics, such as
    /// the crossover step, exist only when the event happened.
    pub fn seed_values(&self, condition: &str, metric: &str) -> SeedValues {
        self.values.get(&(condition.to_string(), metric.to_string())).cloned().unwrap_or_default()
    }

    pub fn agg(&self, condition: &str, metric: &str) -> Result<Aggregate, HarnessError> {
        let v: Vec<f64> = self.values(condition, metric)?.values().copied().collect();
        Ok(Aggregate::of(&v)?)
    }

    /// Per-seed `condition − baseline`.
    pub fn deltas(&self, condition: &str, baseline: &str, metric: &str) -> Result<Vec<f64>, HarnessError> {
        Ok(metrics::paired_deltas(self.values(condition, metric)?, self.values(baseline, metric)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Stat { agg: Aggregate, digits: usize, best: bool },
    Text(String),
}

impl Cell {
    fn stat(agg: Aggregate, digits: usize) -> Self {
        Cell::Stat { agg, digits, best: false }
    }

    pub fn render(&self) -> String {
        match self {
            Cell::Text(t) => t.clone(),
            Cell::Stat { agg, digits, best } => {
                let std = agg.std.map_or_else(|| "n/a".to_string(), |s| format!("{s:.digits$}"));
                format!("{:.digits$} ± {std}{}", agg.mean, if *best { "*" } else { "" })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Better {
    Higher,
    Lower,
}

impl Table {
    fn new(title: &str, columns: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Stars the best mean of column `col`, skipping rows labelled `oracle`.
    fn mark_best(&mut self, col: usize, better: Better) {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in self.rows.iter().enumerate() {
            if row.label == "oracle" {
                continue;
            }
            if let Some(Cell::Stat { agg, .. }) = row.cells.get(col) {
                let wins = match best {
                    None => true,
                    Some((_, b)) => match better {
                        Better::Higher => agg.mean > b,
                        Better::Lower => agg.mean < b,
                    },
                };
                if wins {
                    best = Some((i, agg.mean));
                }
            }
        }
        if let Some((i, _)) = best {
            if let Cell::Stat { best, .. } = &mut self.rows[i].cells[col] {
                *best = true;
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = std::iter::once(self.rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0))
            .chain(self.columns.iter().map(|c| c.chars().count()))
            .collect();
        let rendered: Vec<Vec<String>> = self.rows.iter().map(|r| r.cells.iter().map(Cell::render).collect()).collect();
        for cells in &rendered {
            for (j, c) in cells.iter().enumerate() {
                widths[j + 1] = widths[j + 1].max(c.chars().count());
            }
        }
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let mut header = pad("", widths[0]);
        for (j, c) in self.columns.iter().enumerate() {
            header.push_str("  ");
            header.push_str(&pad(c, widths[j + 1]));
        }
        let _ = writeln!(out, "{}", header.trim_end());
        let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * self.columns.len()));
        for (row, cells) in self.rows.iter().zip(&rendered) {
            let mut line = pad(&row.label, widths[0]);
            for (j, c) in cells.iter().enumerate() {
                line.push_str("  ");
                line.push_str(&pad(c, widths[j + 1]));
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }

    /// One CSV line per stat cell: table, row, column, mean, std, n.
    fn csv_rows(&self, w: &mut csv::Writer<Vec<u8>>) -> csv::Result<()> {
        for row in &self.rows {
            for (col, cell) in self.columns.iter().zip(&row.cells) {
                match cell {
                    Cell::Stat { agg, .. } => w.write_record([
                        self.title.as_str(),
                        &row.label,
                        col,
                        &agg.mean.to_string(),
                        &agg.std.map_or_else(String::new, |s| s.to_string()),
                        &agg.n.to_string(),
                    ])?,
                    Cell::Text(t) => w.write_record([self.title.as_str(), &row.label, col, t, "", ""])?,
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub tables: Vec<Table>,
}

impl Report {
    pub fn to_text(&self) -> String {
        self.tables.iter().map(Table::to_text).collect::<Vec<_>>().join("\n")
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| HarnessError::Io(format!("report csv: {e}"));
        w.write_record(["table", "row", "column", "mean", "std", "n"]).map_err(io)?;
        for t in &self.tables {
            t.csv_rows(&mut w).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(format!("report csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Io(e.to_string()))
    }
}

fn seeds_note(rs: &RunSet) -> String {
    format!("mean ± sample std over {} seed(s); * marks the best non-oracle value", rs.seeds.len())
}

fn signed(agg: &Aggregate, digits: usize) -> String {
    let std = agg.std.map_or_else(|| "n/a".to_string(), |s| format!("{s:.digits$}"));
    format!("{:+.digits$} ± {std}", agg.mean)
}

fn table1(rs: &RunSet) -> Result<Table, HarnessError> {
    let mut t = Table::new("Table 1: gate accuracy on the early-signal (A) and domain-switch (B) tasks", &["acc A", "acc B", "mean β A", "mean β B"]);
    for model in TABLE1_MODELS {
        let mut cells = Vec::new();
        for task in TABLE1_TASKS {
            cells.push(Cell::stat(rs.agg(&format!("{task}/{model}"), names::ACC_ALL)?, 3));
        }
        for task in TABLE1_TASKS {
            let cond = format!("{task}/{model}");
            cells.push(match rs.values(&cond, names::BETA_MEAN) {
                Ok(_) => Cell::stat(rs.agg(&cond, names::BETA_MEAN)?, 3),
                Err(_) => Cell::Text("-".into()),
            });
        }
        t.rows.push(Row {
            label: model.to_string(),
            cells,
        });
    }
    t.mark_best(0, Better::Higher);
    t.mark_best(1, Better::Higher);
    t.notes.push(seeds_note(rs));
    Ok(t)
}

fn table2(rs: &RunSet) -> Result<Table, HarnessError> {
    let mut t = Table::new("Table 2: regression loss, affinity vs precision-weighted gating", &["static early", "static final", "shifting early", "shifting final"]);
    for router in ["affinity", "precision"] {
        let mut cells = Vec::new();
        for setting in ["static", "shifting"] {
            let cond = format!("{setting}/{router}");
            debug_assert!(TABLE2_ROWS.contains(&cond.as_str()));
            cells.push(Cell::stat(rs.agg(&cond, names::EARLY_LOSS)?, 4));
            cells.push(Cell::stat(rs.agg(&cond, names::FINAL_LOSS)?, 4));
        }
        t.rows.push(Row {
            label: router.to_string(),
            cells,
        });
    }
    t.mark_best(1, Better::Lower);
    t.mark_best(3, Better::Lower);
    t.notes.push(seeds_note(rs));
    Ok(t)
}

fn table3(rs: &RunSet) -> Result<Table, HarnessError> {
    let cond = "shifting/precision";
    let mut t = Table::new("Table 3: Π around the reliability shift at step 500", &["Π0", "Π1", "Π2", "Π3", "Π0 > Π2"]);
    for step in DEFAULT_PI_GRID {
        let mut cells = Vec::new();
        let mut means = Vec::new();
        for e in 0..4 {
            let a = rs.agg(cond, &pi_metric(e, step))?;
            means.push(a.mean);
            cells.push(Cell::stat(a, 2));
        }
        cells.push(Cell::Text(if means[0] > means[2] { "yes" } else { "no" }.into()));
        t.rows.push(Row {
            label: format!("step {step}"),
            cells,
        });
    }
    match rs.agg(cond, names::CROSSOVER_STEP) {
        Ok(c) => t.notes.push(format!("first crossover step: {}", Cell::stat(c, 1).render())),
        Err(_) => t.notes.push("first crossover step: none in every seed".into()),
    }
    t.notes.push(format!("mean ± sample std over {} seed(s)", rs.seeds.len()));
    Ok(t)
}

fn anticipation(rs: &RunSet, title: &str, rows: &[&str], baseline: &str) -> Result<Table, HarnessError> {
    let delta_col = format!("Δ vs {baseline}");
    let mut t = Table::new(title, &["acc@transition", delta_col.as_str(), "acc (all)", "eval acc@transition"]);
    for row in rows {
        let delta = Aggregate::of(&rs.deltas(row, baseline, names::ACC_TRANSITION)?)?;
        t.rows.push(Row {
            label: row.to_string(),
            cells: vec![
                Cell::stat(rs.agg(row, names::ACC_TRANSITION)?, 3),
                if *row == baseline { Cell::Text("-".into()) } else { Cell::Text(signed(&delta, 3)) },
                Cell::stat(rs.agg(row, names::ACC_ALL)?, 3),
                Cell::stat(rs.agg(row, names::EVAL_ACC_TRANSITION)?, 3),
            ],
        });
    }
    t.mark_best(0, Better::Higher);
    if rows.contains(&"beta") {
        let inter = metrics::interaction(
            rs.values("beta+ant", names::ACC_TRANSITION)?,
            rs.values("beta", names::ACC_TRANSITION)?,
            rs.values("ant", names::ACC_TRANSITION)?,
            rs.values(baseline, names::ACC_TRANSITION)?,
        )?;
        t.notes.push(format!("β × Ant interaction (paired, vs {baseline}): {}", signed(&Aggregate::of(&inter)?, 3)));
    }
    for cond in ["beta+ant", "beta+pi+ant"] {
        if rows.contains(&cond) {
            let h4 = rs.agg(cond, names::H_BLOCK_T4)?;
            let h5 = rs.agg(cond, names::H_BLOCK_T5)?;
            t.notes.push(format!(
                "{cond}: domain-A block of h at t=4 {:.2}, t=5 {:.2}",
                h4.mean, h5.mean
            ));
        }
    }
    t.notes.push(seeds_note(rs));
    Ok(t)
}

fn lm(rs: &RunSet) -> Result<Table, HarnessError> {
    let mut t = Table::new("Table 6: character-level language model", &["BPC (all)", "BPC (transition)", "pB@transition", "pB@mid", "K(99%)"]);
    for row in LM_ROWS {
        t.rows.push(Row {
            label: row.to_string(),
            cells: vec![
                Cell::stat(rs.agg(row, names::BPC_ALL)?, 3),
                Cell::stat(rs.agg(row, names::BPC_TRANSITION)?, 3),
                Cell::stat(rs.agg(row, names::P_CORRECT_TRANSITION)?, 3),
                Cell::stat(rs.agg(row, names::P_CORRECT_MID)?, 3),
                Cell::stat(rs.agg(row, names::K99)?, 2),
            ],
        });
    }
    t.mark_best(0, Better::Lower);
    t.mark_best(1, Better::Lower);
    t.mark_best(2, Better::Higher);
    t.mark_best(3, Better::Higher);
    t.mark_best(4, Better::Lower);
    for row in ["beta", "beta+ant"] {
        let d = Aggregate::of(&rs.deltas(row, "standard", names::BPC_TRANSITION)?)?;
        t.notes.push(format!("paired Δ BPC (transition), {row} − standard: {}", signed(&d, 3)));
    }
    t.notes.push(seeds_note(rs));
    Ok(t)
}

pub fn render(rs: &RunSet) -> Result<Report, HarnessError> {
    let tables = match rs.experiment {
        ExperimentId::Table1 => vec![table1(rs)?],
        ExperimentId::Table2 => vec![table2(rs)?],
        ExperimentId::Table3 => vec![table3(rs)?],
        ExperimentId::Table4 => vec![anticipation(rs, "Table 4: anticipatory routing at the domain transition", &TABLE4_ROWS, "baseline")?],
        ExperimentId::Ablation => vec![anticipation(rs, "Table 5: mechanism ablation at the domain transition", &ABLATION_ROWS, "none")?],
        ExperimentId::Lm => vec![lm(rs)?],
    };
    Ok(Report { tables })
}
