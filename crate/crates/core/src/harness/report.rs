//! Per-run metrics, per-arm aggregates and on-disk emission. Every number
//! here is a pure function of the trajectory logs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineConfig, Scenario};
use crate::error::{Error, Result};
use crate::scalar::wrap_angle;
use crate::sim_env::{ScenarioMeta, TrajectoryLog};

pub const REPORT_SCHEMA_VERSION: &str = "koopnav-report/1";

/// Nearest-rank percentile of an unsorted sample; `None` when empty.
fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Solve times of the steps where a QP was actually solved.
pub fn solve_times_us(log: &TrajectoryLog) -> Vec<f64> {
    log.records
        .iter()
        .filter(|r| r.status != "skipped")
        .map(|r| r.solve_time_us)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    pub completed: bool,
    /// Steps to reach the final target; `None` if never reached.
    pub time_to_completion: Option<usize>,
    /// Visited states (including the final one) with negative clearance.
    pub collision_steps: usize,
    #[serde(with = "crate::scalar::nonfinite")]
    pub min_clearance: f64,
    pub mean_solve_us: Option<f64>,
    pub median_solve_us: Option<f64>,
    pub p95_solve_us: Option<f64>,
    /// Steps whose solution used any slack above `1e-6`.
    pub slack_activations: usize,
    pub fallback_steps: usize,
    pub path_length: f64,
    /// Sum of absolute heading increments; a zigzag proxy.
    pub heading_change: f64,
}

impl RunMetrics {
    pub fn from_log(log: &TrajectoryLog) -> Self {
        let mut clear: Vec<f64> = log.records.iter().map(|r| r.min_dist).collect();
        clear.extend(log.final_min_dist);
        let mut poses: Vec<[f64; 3]> = log.records.iter().map(|r| [r.x, r.y, r.theta]).collect();
        poses.extend(log.final_state);
        let (path_length, heading_change) = poses.windows(2).fold((0.0, 0.0), |(l, h), w| {
            (
                l + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]),
                h + wrap_angle(w[1][2] - w[0][2]).abs(),
            )
        });
        let times = solve_times_us(log);
        RunMetrics {
            steps: log.records.len(),
            completed: log.completed,
            time_to_completion: log.completed.then_some(log.records.len()),
            collision_steps: clear.iter().filter(|d| **d < 0.0).count(),
            min_clearance: clear.iter().copied().fold(f64::INFINITY, f64::min),
            mean_solve_us: mean(&times),
            median_solve_us: percentile(&times, 0.5),
            p95_solve_us: percentile(&times, 0.95),
            slack_activations: log.records.iter().filter(|r| r.slack_total > 1e-6).count(),
            fallback_steps: log.records.iter().filter(|r| r.fallback).count(),
            path_length,
            heading_change,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub meta: ScenarioMeta,
    /// Trajectory file, relative to the report directory.
    pub file: String,
    pub final_state: Option<[f64; 3]>,
    #[serde(with = "crate::scalar::nonfinite::option", default)]
    pub final_min_dist: Option<f64>,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmAggregate {
    pub arm: String,
    pub alpha: Option<f64>,
    pub delta: f64,
    pub runs: usize,
    pub completed: usize,
    pub collision_steps: usize,
    pub runs_with_collision: usize,
    #[serde(with = "crate::scalar::nonfinite")]
    pub min_clearance: f64,
    pub mean_time_to_completion: Option<f64>,
    /// Pooled over every solve in the arm.
    pub mean_solve_us: Option<f64>,
    pub median_solve_us: Option<f64>,
    pub p95_solve_us: Option<f64>,
    pub slack_activations: usize,
    pub mean_path_length: Option<f64>,
    pub mean_heading_change: Option<f64>,
}

impl ArmAggregate {
    pub fn from_logs(arm: &str, logs: &[&TrajectoryLog]) -> Self {
        let metrics: Vec<RunMetrics> = logs.iter().map(|l| RunMetrics::from_log(l)).collect();
        let times: Vec<f64> = logs.iter().flat_map(|l| solve_times_us(l)).collect();
        let ttc: Vec<f64> = metrics
            .iter()
            .filter_map(|m| m.time_to_completion.map(|t| t as f64))
            .collect();
        let first = logs.first().map(|l| &l.meta);
        ArmAggregate {
            arm: arm.into(),
            alpha: first.and_then(|m| m.alpha),
            delta: first.map_or(0.0, |m| m.delta),
            runs: logs.len(),
            completed: metrics.iter().filter(|m| m.completed).count(),
            collision_steps: metrics.iter().map(|m| m.collision_steps).sum(),
            runs_with_collision: metrics.iter().filter(|m| m.collision_steps > 0).count(),
            min_clearance: metrics
                .iter()
                .map(|m| m.min_clearance)
                .fold(f64::INFINITY, f64::min),
            mean_time_to_completion: mean(&ttc),
            mean_solve_us: mean(&times),
            median_solve_us: percentile(&times, 0.5),
            p95_solve_us: percentile(&times, 0.95),
            slack_activations: metrics.iter().map(|m| m.slack_activations).sum(),
            mean_path_length: mean(&metrics.iter().map(|m| m.path_length).collect::<Vec<_>>()),
            mean_heading_change: mean(
                &metrics.iter().map(|m| m.heading_change).collect::<Vec<_>>(),
            ),
        }
    }
}

/// Output of one experiment. `logs` travel in memory and as trajectory
/// files; `report.json` holds everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub experiment: String,
    pub scenario: Scenario,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub runs: Vec<RunSummary>,
    pub arms: Vec<ArmAggregate>,
    #[serde(skip)]
    pub logs: Vec<TrajectoryLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmitFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for EmitFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EmitFormat::Csv),
            "json" => Ok(EmitFormat::Json),
            other => Err(Error::Config(format!(
                "unknown output format `{other}` (expected csv or json)"
            ))),
        }
    }
}

fn run_label(meta: &ScenarioMeta) -> String {
    if meta.arm.is_empty() {
        meta.scenario.clone()
    } else {
        format!("{}-{}", meta.scenario, meta.arm)
    }
}

impl ExperimentReport {
    pub fn new(
        experiment: &str,
        scenario: Scenario,
        config: PipelineConfig,
        config_hash: String,
        logs: Vec<TrajectoryLog>,
    ) -> Self {
        let mut report = ExperimentReport {
            schema: REPORT_SCHEMA_VERSION.into(),
            experiment: experiment.into(),
            scenario,
            config,
            config_hash,
            runs: Vec::new(),
            arms: Vec::new(),
            logs,
        };
        report.recompute(EmitFormat::Csv);
        report
    }

    /// Rebuild `runs` and `arms` from `logs`.
    pub fn recompute(&mut self, format: EmitFormat) {
        let ext = match format {
            EmitFormat::Csv => "csv",
            EmitFormat::Json => "json",
        };
        self.runs = self
            .logs
            .iter()
            .map(|l| RunSummary {
                meta: l.meta.clone(),
                file: format!("trajectory_{}_{}.{ext}", run_label(&l.meta), l.meta.seed),
                final_state: l.final_state,
                final_min_dist: l.final_min_dist,
                metrics: RunMetrics::from_log(l),
            })
            .collect();
        self.arms = self.recomputed_arms();
    }

    pub fn recomputed_arms(&self) -> Vec<ArmAggregate> {
        let mut names: Vec<&str> = Vec::new();
        for l in &self.logs {
            if !names.contains(&l.meta.arm.as_str()) {
                names.push(&l.meta.arm);
            }
        }
        names
            .iter()
            .map(|a| {
                let logs: Vec<&TrajectoryLog> =
                    self.logs.iter().filter(|l| l.meta.arm == *a).collect();
                ArmAggregate::from_logs(a, &logs)
            })
            .collect()
    }

    pub fn arm(&self, name: &str) -> Option<&ArmAggregate> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// Logs of one arm in seed order.
    pub fn arm_logs(&self, name: &str) -> Vec<&TrajectoryLog> {
        self.logs.iter().filter(|l| l.meta.arm == name).collect()
    }
}

pub const SUMMARY_CSV_HEADER: &str = "scenario,arm,seed,alpha,delta,steps,completed,time_to_completion,collision_steps,min_clearance,mean_solve_us,median_solve_us,p95_solve_us,slack_activations,fallback_steps,path_length,heading_change";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(SUMMARY_CSV_HEADER);
    s.push('\n');
    for r in &report.runs {
        let m = &r.metrics;
        let row = [
            r.meta.scenario.clone(),
            r.meta.arm.clone(),
            r.meta.seed.to_string(),
            opt(r.meta.alpha),
            r.meta.delta.to_string(),
            m.steps.to_string(),
            m.completed.to_string(),
            opt(m.time_to_completion),
            m.collision_steps.to_string(),
            m.min_clearance.to_string(),
            opt(m.mean_solve_us),
            opt(m.median_solve_us),
            opt(m.p95_solve_us),
            m.slack_activations.to_string(),
            m.fallback_steps.to_string(),
            m.path_length.to_string(),
            m.heading_change.to_string(),
        ];
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Writes one trajectory file per run, `summary.csv` (header only for an
/// empty report) and `report.json`. Returns the paths written.
pub fn emit(
    report: &ExperimentReport,
    format: EmitFormat,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut report = report.clone();
    report.recompute(format);
    let mut written = Vec::new();
    for (log, run) in report.logs.iter().zip(&report.runs) {
        let path = dir.join(&run.file);
        match format {
            EmitFormat::Csv => log.save_csv(&path)?,
            EmitFormat::Json => log.save_json(&path)?,
        }
        written.push(path);
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary_csv(&report)).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    let path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(&path, e))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads `report.json` and the trajectory files it names back into a
/// report with `logs` populated.
pub fn load_report(dir: impl AsRef<Path>) -> Result<ExperimentReport> {
    let dir = dir.as_ref();
    let path = dir.join("report.json");
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut report: ExperimentReport =
        serde_json::from_str(&s).map_err(|e| Error::format(&path, e))?;
    if report.schema != REPORT_SCHEMA_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "expected schema {REPORT_SCHEMA_VERSION}, found {}",
                report.schema
            ),
        ));
    }
    let mut logs = Vec::with_capacity(report.runs.len());
    for run in &report.runs {
        let path = dir.join(&run.file);
        let log = if run.file.ends_with(".json") {
            let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&s).map_err(|e| Error::format(&path, e))?
        } else {
            let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let records = TrajectoryLog::read_csv_records(std::io::BufReader::new(f))
                .map_err(|e| Error::format(&path, e))?;
            TrajectoryLog {
                meta: run.meta.clone(),
                records,
                final_state: run.final_state,
                final_min_dist: run.final_min_dist,
                completed: run.metrics.completed,
            }
        };
        logs.push(log);
    }
    report.logs = logs;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_env::StepRecord;

    fn rec(k: usize, x: f64, theta: f64, d: f64, slack: f64) -> StepRecord {
        StepRecord {
            k,
            x,
            y: 0.0,
            theta,
            v: 0.5,
            omega: 0.0,
            ref_x: 0.0,
            ref_y: 0.0,
            ref_theta: 0.0,
            pred_x: 0.0,
            pred_y: 0.0,
            pred_theta: 0.0,
            min_dist: d,
            delta: 0.1,
            slack_shared: 0.0,
            slack_step_max: slack,
            slack_total: slack,
            objective: 1.0,
            solve_time_us: 100.0 * (k + 1) as f64,
            qp_iterations: 10,
            status: "optimal".into(),
            fallback: false,
            rg_flagged: false,
            target_index: 0,
            halfspaces: String::new(),
        }
    }

    fn log(arm: &str, seed: u64) -> TrajectoryLog {
        let mut l = TrajectoryLog::new(ScenarioMeta {
            scenario: "t".into(),
            arm: arm.into(),
            alpha: Some(0.1),
            delta: 0.1,
            seed,
            config_hash: "h".into(),
        });
        l.push(rec(0, 0.0, 0.0, 0.5, 0.0)).unwrap();
        l.push(rec(1, 1.0, 0.5, -0.1, 0.2)).unwrap();
        l.push(rec(2, 2.0, -0.5, 0.3, 0.0)).unwrap();
        l.final_state = Some([3.0, 0.0, 0.0]);
        l.final_min_dist = Some(-0.2);
        l.completed = seed.is_multiple_of(2);
        l
    }

    #[test]
    fn metrics_by_hand() {
        let m = RunMetrics::from_log(&log("a", 0));
        assert_eq!(m.steps, 3);
        assert_eq!(m.collision_steps, 2);
        assert_eq!(m.min_clearance, -0.2);
        assert_eq!(m.slack_activations, 1);
        assert!((m.path_length - 3.0).abs() < 1e-12);
        assert!((m.heading_change - 2.0).abs() < 1e-12);
        assert_eq!(m.median_solve_us, Some(200.0));
        assert_eq!(m.p95_solve_us, Some(300.0));
        assert_eq!(m.time_to_completion, Some(3));
        assert_eq!(RunMetrics::from_log(&log("a", 1)).time_to_completion, None);
    }

    #[test]
    fn aggregates_group_by_arm() {
        let logs = vec![log("a", 0), log("b", 0), log("a", 1)];
        let r = ExperimentReport::new(
            "x",
            super::super::Scenario::builtin("free").unwrap(),
            PipelineConfig::default(),
            "h".into(),
            logs,
        );
        assert_eq!(r.arms.len(), 2);
        let a = r.arm("a").unwrap();
        assert_eq!(a.runs, 2);
        assert_eq!(a.completed, 1);
        assert_eq!(a.collision_steps, 4);
        assert_eq!(a.runs_with_collision, 2);
        assert_eq!(r.runs[0].file, "trajectory_t-a_0.csv");
    }

    #[test]
    fn emit_roundtrip_both_formats() {
        let logs = vec![log("a", 0), log("a", 1)];
        let r = ExperimentReport::new(
            "x",
            super::super::Scenario::builtin("free").unwrap(),
            PipelineConfig::default(),
            "h".into(),
            logs,
        );
        for fmt in [EmitFormat::Csv, EmitFormat::Json] {
            let dir = tempfile::tempdir().unwrap();
            let files = emit(&r, fmt, dir.path()).unwrap();
            assert_eq!(files.len(), 4);
            let back = load_report(dir.path()).unwrap();
            assert_eq!(back.logs, r.logs);
            assert_eq!(back.arms, r.arms);
            assert_eq!(back.recomputed_arms(), r.arms);
        }
    }

    #[test]
    fn empty_report_has_header_only_summary() {
        let r = ExperimentReport::new(
            "x",
            super::super::Scenario::builtin("free").unwrap(),
            PipelineConfig::default(),
            "h".into(),
            vec![],
        );
        let dir = tempfile::tempdir().unwrap();
        emit(&r, EmitFormat::Csv, dir.path()).unwrap();
        let s = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(s, format!("{SUMMARY_CSV_HEADER}\n"));
        assert!(load_report(dir.path()).unwrap().logs.is_empty());
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[], 0.5), None);
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5), Some(2.0));
        assert_eq!(percentile(&[5.0], 0.95), Some(5.0));
    }
}
