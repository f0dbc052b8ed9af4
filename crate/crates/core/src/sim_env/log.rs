//! Per-step closed-loop records and their CSV/JSON encodings.
//!
//! CSV layout (schema `koopnav-trajectory/1`): one `#` metadata line, a
//! header row with [`CSV_COLUMNS`] in that order, then one row per executed
//! control. `halfspaces` packs the active constraints as
//! `id:a:b:c` entries joined by `|`, where `a*x + b*y + c >= delta`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_SCHEMA_VERSION: &str = "koopnav-trajectory/1";

pub const CSV_COLUMNS: [&str; 25] = [
    "k",
    "x",
    "y",
    "theta",
    "v",
    "omega",
    "ref_x",
    "ref_y",
    "ref_theta",
    "pred_x",
    "pred_y",
    "pred_theta",
    "min_dist",
    "delta",
    "slack_shared",
    "slack_step_max",
    "slack_total",
    "objective",
    "solve_time_us",
    "qp_iterations",
    "status",
    "fallback",
    "rg_flagged",
    "target_index",
    "halfspaces",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
    pub ref_x: f64,
    pub ref_y: f64,
    pub ref_theta: f64,
    pub pred_x: f64,
    pub pred_y: f64,
    pub pred_theta: f64,
    /// Signed clearance of the state at step `k` (before the control is applied).
    #[serde(with = "crate::scalar::nonfinite")]
    pub min_dist: f64,
    pub delta: f64,
    pub slack_shared: f64,
    pub slack_step_max: f64,
    pub slack_total: f64,
    pub objective: f64,
    pub solve_time_us: f64,
    pub qp_iterations: usize,
    pub status: String,
    pub fallback: bool,
    pub rg_flagged: bool,
    pub target_index: usize,
    pub halfspaces: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScenarioMeta {
    pub scenario: String,
    pub arm: String,
    /// `None` for the untightened baseline.
    pub alpha: Option<f64>,
    pub delta: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrajectoryLog {
    pub meta: ScenarioMeta,
    pub records: Vec<StepRecord>,
    /// Final state after the last applied control.
    pub final_state: Option<[f64; 3]>,
    /// Clearance of `final_state`.
    #[serde(with = "crate::scalar::nonfinite::option", default)]
    pub final_min_dist: Option<f64>,
    pub completed: bool,
}

impl TrajectoryLog {
    pub fn new(meta: ScenarioMeta) -> Self {
        TrajectoryLog {
            meta,
            ..Default::default()
        }
    }

    /// Appends a record; `k` must exceed the last one.
    pub fn push(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.k <= last.k {
                return Err(Error::InvalidInput(format!(
                    "log records must be strictly ordered: {} after {}",
                    rec.k, last.k
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    fn meta_line(&self) -> String {
        let alpha = self
            .meta
            .alpha
            .map(|a| a.to_string())
            .unwrap_or_else(|| "none".into());
        format!(
            "# schema={} scenario={} arm={} seed={} alpha={} delta={} config_hash={} completed={}",
            CSV_SCHEMA_VERSION,
            self.meta.scenario,
            self.meta.arm,
            self.meta.seed,
            alpha,
            self.meta.delta,
            self.meta.config_hash,
            self.completed
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.meta_line())?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf8 csv")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    /// Parses the records of a CSV written by [`TrajectoryLog::write_csv`].
    /// Metadata other than the schema version is not recovered.
    pub fn read_csv_records<R: BufRead>(
        mut input: R,
    ) -> std::result::Result<Vec<StepRecord>, String> {
        let mut first = String::new();
        input.read_line(&mut first).map_err(|e| e.to_string())?;
        let expected = format!("schema={CSV_SCHEMA_VERSION}");
        if !first.split_whitespace().any(|t| t == expected) {
            return Err(format!(
                "expected {expected} in metadata line, found `{}`",
                first.trim()
            ));
        }
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
        let missing: Vec<&str> = CSV_COLUMNS
            .iter()
            .copied()
            .filter(|c| !headers.iter().any(|h| h == *c))
            .collect();
        if !missing.is_empty() {
            return Err(format!("missing columns: {}", missing.join(", ")));
        }
        rdr.deserialize()
            .collect::<std::result::Result<Vec<StepRecord>, _>>()
            .map_err(|e| e.to_string())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(k: usize) -> StepRecord {
        StepRecord {
            k,
            x: 0.1 * k as f64,
            y: -0.25,
            theta: 0.3,
            v: 0.5,
            omega: -0.125,
            ref_x: 1.0,
            ref_y: 0.0,
            ref_theta: 0.0,
            pred_x: 0.1,
            pred_y: 0.2,
            pred_theta: 0.3,
            min_dist: 0.7,
            delta: 0.06,
            slack_shared: 0.0,
            slack_step_max: 0.0,
            slack_total: 0.0,
            objective: 12.5,
            solve_time_us: 830.0,
            qp_iterations: 75,
            status: "optimal".into(),
            fallback: false,
            rg_flagged: false,
            target_index: 0,
            halfspaces: "0:-1:0:0.5".into(),
        }
    }

    #[test]
    fn header_matches_serialized_fields() {
        let mut log = TrajectoryLog::default();
        log.push(record(0)).unwrap();
        let s = log.to_csv_string();
        let header = s.lines().nth(1).unwrap();
        assert_eq!(header, CSV_COLUMNS.join(","));
        let recs = TrajectoryLog::read_csv_records(s.as_bytes()).unwrap();
        assert_eq!(recs, log.records);
    }

    #[test]
    fn empty_log_is_header_only() {
        let s = TrajectoryLog::default().to_csv_string();
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with("# schema=koopnav-trajectory/1"));
    }

    #[test]
    fn records_must_be_ordered() {
        let mut log = TrajectoryLog::default();
        log.push(record(3)).unwrap();
        assert!(log.push(record(3)).is_err());
        assert!(log.push(record(2)).is_err());
        log.push(record(4)).unwrap();
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let bad = "# schema=koopnav-trajectory/0\nk,x\n";
        let err = TrajectoryLog::read_csv_records(bad.as_bytes()).unwrap_err();
        assert!(err.contains("koopnav-trajectory/1"));
        let missing = format!("# schema={CSV_SCHEMA_VERSION}\nk,x,y\n");
        let err = TrajectoryLog::read_csv_records(missing.as_bytes()).unwrap_err();
        assert!(err.contains("theta") && err.contains("halfspaces"));
    }
}
