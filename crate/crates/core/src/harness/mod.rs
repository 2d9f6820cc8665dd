//! Config-driven experiments over a pool of adapters, with JSON-lines
//! reports and CSV summaries.

mod analysis;
mod config;
mod inhouse;
mod report;
mod run;
mod sweep;

pub use analysis::coefficient_distribution;
pub use config::{
    desk_lora_training, desk_model, planted_pool, planted_suite, Combine, ExperimentConfig, MethodSpec, PoolSpec,
    PRESETS,
};
pub use inhouse::{inhouse_window_experiment, InhouseWindow, WindowRow};
pub use report::{
    aggregate, mean, median, relative_improvement, summary_path, Aggregate, AxisAggregate, CellRecord,
    ExperimentReport, ReportHeader, RunSummary, TuneSummary, NORMALIZATION,
};
pub use run::{
    derive_seed, load_pool_dir, name_hash, parallel_map, run_cell, run_cell_with_overlay, run_experiment, run_experiment_with, seeded_task,
    target_training,
    worker_count, TargetAdapter, TaskEntry, Workspace, WORKERS_ENV,
};
pub use sweep::{axis_aggregates, design_point_name, sweep_design_space, ties_grid, SweepAxes, TIES_COEFFS, TIES_PRUNE_FRACS};
