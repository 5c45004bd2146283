use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::run::{run_experiment, ExperimentReport, REPORT_JSON};
use crate::config::{ExperimentConfig, GridConfig};
use crate::error::{Error, Result};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const FAILURES_JSON: &str = "failures.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub name: String,
    pub config_hash: String,
    pub error: String,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd {
            mean,
            std,
            count: values.len(),
        })
    }
}

/// Aggregate of one (variant, student count) row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub students: usize,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub reports: Vec<ExperimentReport>,
    /// Cells whose results were already on disk.
    pub reused: usize,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<SummaryRow>,
}

/// A finished cell's report when it belongs to `config`.
pub fn completed_report(config: &ExperimentConfig) -> Option<ExperimentReport> {
    let text = fs::read_to_string(config.output_dir.join(REPORT_JSON)).ok()?;
    let report: ExperimentReport = serde_json::from_str(&text).ok()?;
    (report.config_hash == config.hash() && report.epochs == config.train.epochs).then_some(report)
}

/// Runs every cell of the grid, reusing finished cells and resuming
/// interrupted ones. A failing cell is recorded and the grid continues.
pub fn run_grid(grid: &GridConfig, base: &ExperimentConfig) -> Result<GridOutcome> {
    let cells = grid.cells(base)?;
    fs::create_dir_all(&grid.output_dir).map_err(|e| Error::io(&grid.output_dir, e))?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut reused = 0;
    for (k, cell) in cells.iter().enumerate() {
        if let Some(r) = completed_report(cell) {
            log::info!("[{}/{}] {} already complete", k + 1, cells.len(), cell.name);
            reused += 1;
            reports.push(r);
            continue;
        }
        log::info!("[{}/{}] {} -> {}", k + 1, cells.len(), cell.name, cell.output_dir.display());
        match run_experiment(cell, &cell.output_dir, true) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::error!("{} failed: {e}", cell.name);
                failures.push(CellFailure {
                    name: cell.name.clone(),
                    config_hash: cell.hash(),
                    error: e.to_string(),
                });
            }
        }
    }
    let summary = summarize(&cells, &reports);
    let path = grid.output_dir.join(SUMMARY_CSV);
    fs::write(&path, summary_csv(&summary)).map_err(|e| Error::io(&path, e))?;
    let path = grid.output_dir.join(FAILURES_JSON);
    fs::write(&path, serde_json::to_string_pretty(&failures).expect("serializable")).map_err(|e| Error::io(&path, e))?;
    Ok(GridOutcome {
        reports,
        reused,
        failures,
        summary,
    })
}

/// Groups reports by (variant, student count) in grid order.
pub fn summarize(cells: &[ExperimentConfig], reports: &[ExperimentReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for c in cells {
        let key = (c.variant.to_string(), c.model.students);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, students)| {
            let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in reports
                .iter()
                .filter(|r| r.variant == variant && r.final_eval.student_acc.len() == students)
            {
                let e = &r.final_eval;
                let mut push = |k: &str, v: Option<f64>| {
                    if let Some(v) = v {
                        values.entry(k.to_string()).or_default().push(v);
                    }
                };
                push("student_mean_acc", Some(e.student_mean_acc));
                push("ens_acc", Some(e.ens_acc));
                push("fusion_acc", e.fusion_acc);
                push("leader_acc", e.leader_acc);
                push("cosine", e.cosine);
            }
            let metrics = values
                .into_iter()
                .filter_map(|(k, v)| MeanStd::of(&v).map(|m| (k, m)))
                .collect();
            SummaryRow {
                variant,
                students,
                metrics,
            }
        })
        .collect()
}

const SUMMARY_METRICS: [&str; 5] = ["student_mean_acc", "ens_acc", "fusion_acc", "leader_acc", "cosine"];

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("variant,students,runs");
    for m in SUMMARY_METRICS {
        let _ = write!(out, ",{m}_mean,{m}_std");
    }
    out.push('\n');
    for r in rows {
        let runs = r.metrics.get("student_mean_acc").map_or(0, |m| m.count);
        let _ = write!(out, "{},{},{runs}", r.variant, r.students);
        for m in SUMMARY_METRICS {
            match r.metrics.get(m) {
                Some(v) => {
                    let _ = write!(out, ",{:.4},{:.4}", v.mean, v.std);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}
