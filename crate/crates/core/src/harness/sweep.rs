use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodSpec};
use super::report::{mean, relative_improvement, AxisAggregate, CellRecord, ExperimentReport};
use super::run::{run_experiment_with, Workspace};
use crate::error::{Error, Result};
use crate::merge::{Activation, Granularity, MergeRecipe};
use crate::selection::SelectionStrategy;

/// Design axes for the gradient-based sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub granularities: Vec<Granularity>,
    pub selections: Vec<SelectionStrategy>,
    pub activations: Vec<Activation>,
    pub ks: Vec<usize>,
}

impl SweepAxes {
    pub fn full() -> Self {
        Self {
            granularities: Granularity::ALL.to_vec(),
            selections: vec![SelectionStrategy::Random, SelectionStrategy::Evaluation, SelectionStrategy::QuasiFim],
            activations: Activation::ALL.to_vec(),
            ks: vec![2, 5, 10],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.granularities.is_empty() || self.selections.is_empty() || self.activations.is_empty() || self.ks.is_empty() {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        Ok(())
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Method name encoding the design point.
pub fn design_point_name(g: Granularity, s: SelectionStrategy, a: Activation) -> String {
    format!("ours/{}/{}/{}", snake(&g), s.name(), snake(&a))
}

/// Every combination of the axes, run as gradient-based tuning from zero
/// on `base`'s tasks, seeds and target-adapter setting.
pub fn sweep_design_space(ws: &Workspace, base: &ExperimentConfig, axes: &SweepAxes) -> Result<ExperimentReport> {
    axes.validate()?;
    let mut methods = Vec::new();
    for &g in &axes.granularities {
        for &s in &axes.selections {
            for &a in &axes.activations {
                methods.push(MethodSpec::ours(g, s, a).with_name(design_point_name(g, s, a)));
            }
        }
    }
    let cfg = ExperimentConfig {
        methods,
        k_values: axes.ks.clone(),
        ..base.clone()
    };
    let mut report = run_experiment_with(ws, &cfg)?;
    report.axes = axis_aggregates(&report.cells);
    Ok(report)
}

fn axis_values(c: &CellRecord) -> Vec<(&'static str, String)> {
    let mut out = vec![("k", c.k.to_string())];
    if let Some(m) = c.config.methods.first() {
        out.push(("selection", m.selection.name().to_string()));
        if let Some(t) = m.tune_config() {
            out.push(("granularity", snake(&t.granularity)));
            out.push(("activation", snake(&t.activation)));
        }
    }
    out
}

/// Per-axis-value averages: mean accuracy, mean relative improvement
/// against both baselines, and tasks outperformed on seed-and-design means.
pub fn axis_aggregates(cells: &[CellRecord]) -> Vec<AxisAggregate> {
    let mut groups: BTreeMap<(&'static str, String, bool), Vec<&CellRecord>> = BTreeMap::new();
    for c in cells.iter().filter(|c| !c.failed()) {
        for (axis, value) in axis_values(c) {
            groups.entry((axis, value, c.include_target_lora)).or_default().push(c);
        }
    }
    groups
        .into_iter()
        .map(|((axis, value, include_target_lora), group)| {
            let acc: Vec<f64> = group.iter().filter_map(|c| c.test_accuracy).collect();
            let rel = |pick: fn(&CellRecord) -> Option<f64>| -> Option<f64> {
                let v: Vec<f64> = group
                    .iter()
                    .filter_map(|c| relative_improvement(c.test_accuracy?, pick(c)?))
                    .collect();
                (!v.is_empty()).then(|| mean(&v))
            };
            let mut per_task: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
            for c in &group {
                if let (Some(a), Some(b), Some(t)) = (c.test_accuracy, c.base_accuracy, c.target_accuracy) {
                    let e = per_task.entry(c.task.as_str()).or_default();
                    e[0].push(a);
                    e[1].push(b);
                    e[2].push(t);
                }
            }
            let beats = |j: usize| per_task.values().filter(|v| mean(&v[0]) > mean(&v[j])).count();
            AxisAggregate {
                axis: axis.to_string(),
                value,
                include_target_lora,
                cells: group.len(),
                mean_accuracy: mean(&acc),
                pct_vs_base: rel(|c| c.base_accuracy),
                pct_vs_target: rel(|c| c.target_accuracy),
                outperform_base: beats(1),
                outperform_target: beats(2),
            }
        })
        .collect()
}

pub const TIES_PRUNE_FRACS: [f64; 3] = [0.2, 0.4, 0.6];

/// `Some(c)` for fixed coefficients, `None` for `1/k`.
pub const TIES_COEFFS: [Option<f64>; 3] = [Some(1.0), Some(0.3), None];

/// TIES with every prune fraction and coefficient, with and without the
/// target-task adapter, on randomly selected adapters; one cell per seed.
pub fn ties_grid(ws: &Workspace, base: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut methods = Vec::new();
    for &p in &TIES_PRUNE_FRACS {
        for &c in &TIES_COEFFS {
            let recipe = MergeRecipe::Ties { prune_frac: p, coeff: c };
            methods.push(MethodSpec::merge(recipe.label(), SelectionStrategy::Random, recipe));
        }
    }
    let mut cells = Vec::new();
    let mut header = None;
    for include in [false, true] {
        let cfg = ExperimentConfig {
            methods: methods.clone(),
            include_target_lora: include,
            report_path: None,
            ..base.clone()
        };
        let r = run_experiment_with(ws, &cfg)?;
        header.get_or_insert(cfg);
        cells.extend(r.cells);
    }
    let mut cfg = header.expect("two runs");
    cfg.report_path = base.report_path.clone();
    let report = ExperimentReport::new(cfg, cells);
    if let Some(path) = &base.report_path {
        report.write(path)?;
    }
    Ok(report)
}
