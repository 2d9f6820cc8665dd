use std::collections::BTreeSet;
use std::path::Path;

use lora_recycle::harness::{
    mean, run_experiment_with, seeded_task, ExperimentConfig, ExperimentReport, Workspace,
};
use lora_recycle::toylab::generate_task;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")).unwrap()
}

#[test]
fn every_cell_appears_once_and_failures_are_flagged() {
    let mut cfg = tiny();
    // The pool has four adapters, so k = 10 cannot be selected.
    cfg.k_values = vec![2, 10];
    cfg.seeds = vec![0, 1];
    let ws = Workspace::prepare(&cfg).unwrap();
    let report = run_experiment_with(&ws, &cfg).unwrap();
    let expected = cfg.tasks.len() * cfg.methods.len() * cfg.k_values.len() * cfg.seeds.len();
    assert_eq!(report.cells.len(), expected);
    let keys: BTreeSet<_> = report
        .cells
        .iter()
        .map(|c| (c.task.clone(), c.method.clone(), c.k, c.seed))
        .collect();
    assert_eq!(keys.len(), expected);
    for c in &report.cells {
        assert_eq!(c.failed(), c.k == 10, "{} {} k={}", c.task, c.method, c.k);
    }
    assert_eq!(report.failed_cells(), expected / 2);
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = tiny();
    let a = run_experiment_with(&Workspace::prepare(&cfg).unwrap(), &cfg).unwrap();
    let b = run_experiment_with(&Workspace::prepare(&cfg).unwrap(), &cfg).unwrap();
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!(x.test_accuracy.map(f64::to_bits), y.test_accuracy.map(f64::to_bits));
        assert_eq!(x.constituents, y.constituents);
        assert_eq!(x.coefficient_distribution, y.coefficient_distribution);
    }
}

#[test]
fn baselines_match_standalone_evaluation() {
    let cfg = tiny();
    let ws = Workspace::prepare(&cfg).unwrap();
    let report = run_experiment_with(&ws, &cfg).unwrap();
    for c in &report.cells {
        let desc = cfg.tasks.iter().find(|t| t.name == c.task).unwrap();
        let data = generate_task(&seeded_task(desc, c.seed)).unwrap();
        let base = ws.model.evaluate_accuracy(None, &data.test).unwrap();
        assert_eq!(c.base_accuracy, Some(base));
        let entry = ws.entry(&c.task, c.seed).unwrap();
        let target = entry.target.as_ref().unwrap();
        let standalone = ws.model.evaluate_accuracy(Some(&target.vectors), &data.test).unwrap();
        assert_eq!(c.target_accuracy, Some(standalone));
    }
}

#[test]
fn aggregates_recompute_from_cells() {
    let mut cfg = tiny();
    cfg.seeds = vec![0, 1];
    let ws = Workspace::prepare(&cfg).unwrap();
    let report = run_experiment_with(&ws, &cfg).unwrap();
    assert_eq!(report.summarize(), report.aggregates);
    for agg in &report.aggregates {
        let group: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.method == agg.method && c.k == agg.k && !c.failed())
            .filter_map(|c| c.test_accuracy)
            .collect();
        assert_eq!(agg.cells, group.len());
        assert_eq!(agg.mean_accuracy.to_bits(), mean(&group).to_bits());
    }
}

#[test]
fn report_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.report_path = Some(dir.path().join("r.jsonl"));
    let ws = Workspace::prepare(&cfg).unwrap();
    let report = run_experiment_with(&ws, &cfg).unwrap();
    let back = ExperimentReport::read(cfg.report_path.as_ref().unwrap()).unwrap();
    assert_eq!(back, report);
    assert!(dir.path().join("r.summary.csv").exists());
}

#[test]
fn cell_echo_reruns_alone() {
    let cfg = tiny();
    let ws = Workspace::prepare(&cfg).unwrap();
    let report = run_experiment_with(&ws, &cfg).unwrap();
    for cell in &report.cells {
        let echo = &cell.config;
        assert_eq!((echo.tasks.len(), echo.methods.len(), echo.k_values.len(), echo.seeds.len()), (1, 1, 1, 1));
        let again = run_experiment_with(&ws, echo).unwrap();
        assert_eq!(again.cells[0].test_accuracy, cell.test_accuracy);
    }
}

#[test]
fn changed_descriptor_is_rejected() {
    let cfg = tiny();
    let ws = Workspace::prepare(&cfg).unwrap();
    let mut changed = cfg.clone();
    changed.tasks[0].seed += 1;
    let err = run_experiment_with(&ws, &changed).unwrap_err();
    assert!(matches!(err, lora_recycle::Error::Config(_)), "{err}");
}
