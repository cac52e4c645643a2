//! Append-only result store: `manifest.json` holds one record per
//! (experiment, condition, seed, config hash), `metrics.csv` flattens the
//! scalar metrics, and `runs/` keeps each run's full result.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use route_lab_core::metrics::RunResult;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub condition: String,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of this condition's own settings; equal across experiments that
    /// share the condition.
    #[serde(default)]
    pub run_hash: String,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds spent training and evaluating.
    pub wallclock: f64,
}

impl RunRecord {
    pub fn key(&self) -> RecordKey<'_> {
        (&self.experiment, &self.condition, self.seed, &self.config_hash)
    }
}

pub type RecordKey<'a> = (&'a str, &'a str, u64, &'a str);

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub condition: String,
    pub seed: u64,
    pub config_hash: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    records: Vec<RunRecord>,
}

#[derive(Debug)]
pub struct ResultStore {
    root: PathBuf,
    records: Vec<RunRecord>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Writes via a temporary file and rename so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn file_stem(condition: &str) -> String {
    condition.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '.' }).collect()
}

impl ResultStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let root = root.into();
        let manifest = root.join("manifest.json");
        let records = if manifest.exists() {
            let text = fs::read_to_string(&manifest).map_err(|e| io_err(&manifest, e))?;
            serde_json::from_str::<Manifest>(&text).map_err(|e| io_err(&manifest, e))?.records
        } else {
            Vec::new()
        };
        Ok(Self { root, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn get(&self, key: RecordKey<'_>) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.key() == key)
    }

    pub fn contains(&self, key: RecordKey<'_>) -> bool {
        self.get(key).is_some()
    }

    /// A stored run of the same condition, seed and settings, from any
    /// experiment.
    pub fn find_equivalent(&self, condition: &str, seed: u64, run_hash: &str) -> Option<&RunRecord> {
        self.records
            .iter()
            .find(|r| !r.run_hash.is_empty() && r.run_hash == run_hash && r.condition == condition && r.seed == seed)
    }

    fn run_path(&self, r: &RunRecord) -> PathBuf {
        let short = &r.config_hash[..r.config_hash.len().min(12)];
        self.root
            .join("runs")
            .join(&r.experiment)
            .join(format!("{}__seed{}__{}.json", file_stem(&r.condition), r.seed, short))
    }

    /// Stores a finished run, replacing any record with the same key.
    pub fn commit(&mut self, record: RunRecord, full: &RunResult) -> Result<(), HarnessError> {
        let path = self.run_path(&record);
        let dir = path.parent().expect("run path has a parent");
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = serde_json::to_vec(full).map_err(|e| io_err(&path, e))?;
        write_atomic(&path, &json)?;
        let key = (record.experiment.clone(), record.condition.clone(), record.seed, record.config_hash.clone());
        self.records.retain(|r| r.key() != (key.0.as_str(), key.1.as_str(), key.2, key.3.as_str()));
        self.records.push(record);
        self.flush()
    }

    fn flush(&self) -> Result<(), HarnessError> {
        fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))?;
        let manifest = Manifest {
            records: self.records.clone(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| io_err(&self.root, e))?;
        write_atomic(&self.root.join("manifest.json"), &json)?;
        let csv_path = self.root.join("metrics.csv");
        let bytes = write_metrics_csv(&self.metric_rows())?;
        write_atomic(&csv_path, &bytes)
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.records
            .iter()
            .flat_map(|r| {
                r.metrics.iter().map(move |(m, v)| MetricRow {
                    experiment: r.experiment.clone(),
                    condition: r.condition.clone(),
                    seed: r.seed,
                    config_hash: r.config_hash.clone(),
                    metric: m.clone(),
                    value: *v,
                })
            })
            .collect()
    }

    /// Full result (loss curves, Π trace, β) of a stored run.
    pub fn load_run(&self, record: &RunRecord) -> Result<RunResult, HarnessError> {
        let path = self.run_path(record);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(&path, e))
    }

    /// Marks an experiment whose run loop stopped early.
    pub fn mark_partial(&self, experiment: &str, reason: &str) {
        let _ = fs::create_dir_all(&self.root);
        let _ = fs::write(self.root.join(format!("{experiment}.partial")), reason);
    }

    pub fn clear_partial(&self, experiment: &str) {
        let _ = fs::remove_file(self.root.join(format!("{experiment}.partial")));
    }
}

pub fn write_metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Io(format!("metrics.csv: {e}")))?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(format!("metrics.csv: {e}")))
}

pub fn read_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricRow>, HarnessError> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Io(format!("metrics.csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(cond: &str, seed: u64, v: f64) -> (RunRecord, RunResult) {
        let mut full = RunResult::new("table4", cond, seed);
        full.set("acc_all", v);
        full.loss_curve = vec![1.0, 0.5];
        let rec = RunRecord {
            experiment: "table4".into(),
            condition: cond.into(),
            seed,
            config_hash: "abc123".into(),
            run_hash: format!("run-{cond}"),
            metrics: full.scalars.clone(),
            wallclock: 0.1,
        };
        (rec, full)
    }

    #[test]
    fn commit_persists_and_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultStore::open(dir.path()).unwrap();
        let (r, f) = record("beta+ant", 0, 0.7);
        store.commit(r.clone(), &f).unwrap();
        let (r2, f2) = record("beta+ant", 0, 0.8);
        store.commit(r2, &f2).unwrap();
        let reopened = ResultStore::open(dir.path()).unwrap();
        assert_eq!(reopened.records().len(), 1);
        assert_eq!(reopened.records()[0].metrics["acc_all"], 0.8);
        assert_eq!(reopened.load_run(&reopened.records()[0]).unwrap().loss_curve, vec![1.0, 0.5]);
        assert!(reopened.contains(("table4", "beta+ant", 0, "abc123")));
        assert!(!reopened.contains(("table4", "beta+ant", 1, "abc123")));
        assert!(reopened.find_equivalent("beta+ant", 0, "run-beta+ant").is_some());
        assert!(reopened.find_equivalent("beta+ant", 0, "run-ant").is_none());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            MetricRow {
                experiment: "lm".into(),
                condition: "beta+ant".into(),
                seed: 3,
                config_hash: "ff".into(),
                metric: "k99".into(),
                value: 2.345_678_901_234_567_8,
            },
            MetricRow {
                experiment: "table2".into(),
                condition: "shifting/precision".into(),
                seed: 0,
                config_hash: "ff".into(),
                metric: "final_loss".into(),
                value: 1e-300,
            },
        ];
        let bytes = write_metrics_csv(&rows).unwrap();
        assert_eq!(read_metrics_csv(&bytes).unwrap(), rows);
    }
}
