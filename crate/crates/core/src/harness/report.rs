use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::selection::SelectionResult;

/// Label recorded with every coefficient distribution.
pub const NORMALIZATION: &str = "min-max per group, then divided by the group sum";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub lr: Option<f64>,
    pub steps: usize,
    pub selected_step: usize,
    pub initial_metric: f64,
    pub best_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneSummary {
    pub runs: Vec<RunSummary>,
    pub wall_clock_secs: f64,
}

/// Outcome of one `(task, method, k, seed)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub task: String,
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub include_target_lora: bool,
    pub reinit_pool: bool,
    /// `None` on success.
    pub error: Option<String>,
    pub test_accuracy: Option<f64>,
    pub base_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub selection: Option<SelectionResult>,
    /// Names of the merged adapters, in coefficient-row order.
    pub constituents: Vec<String>,
    pub target_index: Option<usize>,
    pub tune: Option<TuneSummary>,
    pub coefficient_distribution: Option<Vec<f64>>,
    /// The experiment restricted to this cell.
    pub config: ExperimentConfig,
}

impl CellRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Share of the target-task adapter in the coefficient distribution.
    pub fn target_share(&self) -> Option<f64> {
        Some(self.coefficient_distribution.as_ref()?[self.target_index?])
    }

    /// Whether the target-task adapter holds the strictly largest share.
    pub fn target_has_largest_share(&self) -> Option<bool> {
        let dist = self.coefficient_distribution.as_ref()?;
        let t = self.target_index?;
        Some(dist.iter().enumerate().all(|(i, &v)| i == t || v < dist[t]))
    }
}

/// `(method − baseline) / baseline`; undefined for a zero baseline.
pub fn relative_improvement(method: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| (method - baseline) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub k: usize,
    pub include_target_lora: bool,
    pub reinit_pool: bool,
    pub cells: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub median_accuracy: f64,
    pub mean_base_accuracy: f64,
    pub mean_target_accuracy: f64,
    /// Mean relative improvement over cells with a nonzero baseline.
    pub pct_vs_base: Option<f64>,
    pub pct_vs_target: Option<f64>,
    /// Tasks whose seed-mean accuracy beats the seed-mean baseline.
    pub outperform_base: usize,
    pub outperform_target: usize,
    /// Cell counts per relative-improvement bucket against the base model.
    pub buckets_vs_base: Vec<(String, usize)>,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn bucket_labels(thresholds: &[f64]) -> Vec<String> {
    let mut t: Vec<f64> = thresholds.to_vec();
    t.sort_by(|a, b| a.total_cmp(b));
    let mut labels = Vec::new();
    let pct = |x: f64| format!("{}%", x * 100.0);
    for (i, &x) in t.iter().enumerate().rev() {
        labels.push(match t.get(i + 1) {
            None => format!("< -{}", pct(x)),
            Some(&y) => format!("[-{}, -{})", pct(y), pct(x)),
        });
    }
    labels.push(match t.first() {
        Some(&x) => format!("[-{}, {}]", pct(x), pct(x)),
        None => "any".to_string(),
    });
    for (i, &x) in t.iter().enumerate() {
        labels.push(match t.get(i + 1) {
            None => format!("> {}", pct(x)),
            Some(&y) => format!("({}, {}]", pct(x), pct(y)),
        });
    }
    labels
}

fn bucket_of(x: f64, thresholds: &[f64]) -> usize {
    let mut t: Vec<f64> = thresholds.to_vec();
    t.sort_by(|a, b| a.total_cmp(b));
    let n = t.len();
    let below = t.iter().filter(|&&e| x < -e).count();
    if below > 0 {
        return n - below;
    }
    let above = t.iter().filter(|&&e| x > e).count();
    n + above
}

/// Aggregates per `(method, k, include_target_lora, reinit_pool)`.
pub fn aggregate(cells: &[CellRecord], thresholds: &[f64]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, usize, bool, bool), Vec<&CellRecord>> = BTreeMap::new();
    for c in cells {
        groups
            .entry((c.method.clone(), c.k, c.include_target_lora, c.reinit_pool))
            .or_default()
            .push(c);
    }
    let labels = bucket_labels(thresholds);
    groups
        .into_iter()
        .map(|((method, k, include_target_lora, reinit_pool), group)| {
            let ok: Vec<&CellRecord> = group.iter().copied().filter(|c| !c.failed()).collect();
            let acc: Vec<f64> = ok.iter().filter_map(|c| c.test_accuracy).collect();
            let base: Vec<f64> = ok.iter().filter_map(|c| c.base_accuracy).collect();
            let target: Vec<f64> = ok.iter().filter_map(|c| c.target_accuracy).collect();
            let rel = |pick: fn(&CellRecord) -> Option<f64>| -> Vec<f64> {
                ok.iter()
                    .filter_map(|c| relative_improvement(c.test_accuracy?, pick(c)?))
                    .collect()
            };
            let vs_base = rel(|c| c.base_accuracy);
            let vs_target = rel(|c| c.target_accuracy);
            let mut per_task: BTreeMap<&str, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for c in &ok {
                let e = per_task.entry(c.task.as_str()).or_default();
                if let (Some(a), Some(b), Some(t)) = (c.test_accuracy, c.base_accuracy, c.target_accuracy) {
                    e.0.push(a);
                    e.1.push(b);
                    e.2.push(t);
                }
            }
            let outperform = |which: usize| {
                per_task
                    .values()
                    .filter(|(a, b, t)| !a.is_empty() && mean(a) > mean(if which == 0 { b } else { t }))
                    .count()
            };
            let mut counts = vec![0usize; labels.len()];
            for &x in &vs_base {
                counts[bucket_of(x, thresholds)] += 1;
            }
            Aggregate {
                method,
                k,
                include_target_lora,
                reinit_pool,
                cells: group.len(),
                failed: group.len() - ok.len(),
                mean_accuracy: mean(&acc),
                median_accuracy: median(&acc),
                mean_base_accuracy: mean(&base),
                mean_target_accuracy: mean(&target),
                pct_vs_base: (!vs_base.is_empty()).then(|| mean(&vs_base)),
                pct_vs_target: (!vs_target.is_empty()).then(|| mean(&vs_target)),
                outperform_base: outperform(0),
                outperform_target: outperform(1),
                buckets_vs_base: labels.iter().cloned().zip(counts).collect(),
            }
        })
        .collect()
}

/// Aggregate over all cells sharing one value of a sweep axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisAggregate {
    pub axis: String,
    pub value: String,
    pub include_target_lora: bool,
    pub cells: usize,
    pub mean_accuracy: f64,
    pub pct_vs_base: Option<f64>,
    pub pct_vs_target: Option<f64>,
    pub outperform_base: usize,
    pub outperform_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub config: ExperimentConfig,
    pub normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub header: ReportHeader,
    pub cells: Vec<CellRecord>,
    pub aggregates: Vec<Aggregate>,
    #[serde(default)]
    pub axes: Vec<AxisAggregate>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(ReportHeader),
    Cell(Box<CellRecord>),
    Aggregate(Aggregate),
    Axis(AxisAggregate),
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, cells: Vec<CellRecord>) -> Self {
        let aggregates = aggregate(&cells, &config.bucket_thresholds);
        Self {
            header: ReportHeader {
                config,
                normalization: NORMALIZATION.to_string(),
            },
            cells,
            aggregates,
            axes: Vec::new(),
        }
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    pub fn find(&self, method: &str, k: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.k == k)
    }

    pub fn cells_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a CellRecord> + 'a {
        self.cells.iter().filter(move |c| c.method == method)
    }

    /// One JSON document per line: header, cells, aggregates, axes.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut push = |line: &Line| -> Result<()> {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
            Ok(())
        };
        push(&Line::Header(self.header.clone()))?;
        for c in &self.cells {
            push(&Line::Cell(Box::new(c.clone())))?;
        }
        for a in &self.aggregates {
            push(&Line::Aggregate(a.clone()))?;
        }
        for a in &self.axes {
            push(&Line::Axis(a.clone()))?;
        }
        Ok(out)
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut header = None;
        let (mut cells, mut aggregates, mut axes) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<report>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line =
                serde_json::from_str(&line).map_err(|e| Error::Config(format!("report line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) => header = Some(h),
                Line::Cell(c) => cells.push(*c),
                Line::Aggregate(a) => aggregates.push(a),
                Line::Axis(a) => axes.push(a),
            }
        }
        let header = header.ok_or_else(|| Error::Config("report has no header line".into()))?;
        Ok(Self {
            header,
            cells,
            aggregates,
            axes,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(BufReader::new(file))
    }

    /// Summary table, one row per aggregate.
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record([
            "method",
            "k",
            "include_target_lora",
            "reinit_pool",
            "cells",
            "failed",
            "mean_accuracy",
            "median_accuracy",
            "mean_base_accuracy",
            "mean_target_accuracy",
            "pct_vs_base",
            "pct_vs_target",
            "outperform_base",
            "outperform_target",
        ])
        .map_err(io)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for a in &self.aggregates {
            w.write_record([
                a.method.clone(),
                a.k.to_string(),
                a.include_target_lora.to_string(),
                a.reinit_pool.to_string(),
                a.cells.to_string(),
                a.failed.to_string(),
                format!("{:.6}", a.mean_accuracy),
                format!("{:.6}", a.median_accuracy),
                format!("{:.6}", a.mean_base_accuracy),
                format!("{:.6}", a.mean_target_accuracy),
                opt(a.pct_vs_base),
                opt(a.pct_vs_target),
                a.outperform_base.to_string(),
                a.outperform_target.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `path` as JSON lines and the summary next to it with a
    /// `.summary.csv` suffix. Returns the summary path.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))?;
        let csv_path = summary_path(path);
        std::fs::write(&csv_path, self.summary_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        Ok(csv_path)
    }

    /// Recomputes aggregates from the raw cells.
    pub fn summarize(&self) -> Vec<Aggregate> {
        aggregate(&self.cells, &self.header.config.bucket_thresholds)
    }
}

pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.summary.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_improvement_convention() {
        assert!((relative_improvement(0.6, 0.5).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(relative_improvement(0.3, 0.0), None);
        assert!(relative_improvement(0.4, 0.5).unwrap() < 0.0);
    }

    #[test]
    fn buckets() {
        let t = [0.01, 0.05];
        assert_eq!(bucket_labels(&t).len(), 5);
        assert_eq!(bucket_of(-0.2, &t), 0);
        assert_eq!(bucket_of(-0.03, &t), 1);
        assert_eq!(bucket_of(0.0, &t), 2);
        assert_eq!(bucket_of(0.01, &t), 2);
        assert_eq!(bucket_of(0.03, &t), 3);
        assert_eq!(bucket_of(0.5, &t), 4);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
