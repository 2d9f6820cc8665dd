use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use super::analysis::coefficient_distribution;
use super::config::{Combine, ExperimentConfig, MethodSpec, PoolSpec};
use super::report::{CellRecord, ExperimentReport, RunSummary, TuneSummary};
use crate::adapter::{
    load_raw, materialize_task_vectors, reinit_matched, validate_raw, LoraAdapter, TaskVectorSet,
    DEFAULT_MAGNITUDE_CAP,
};
use crate::error::{Error, Result};
use crate::selection::{select_by_evaluation, select_by_similarity, select_random, SelectionResult, SelectionStrategy};
use crate::toylab::{build_synthetic_pool, generate_task, train_target_lora, LoraTrainConfig, ModelConfig, TaskDataset, TaskDescriptor, ToyModel};
use crate::tuner::{tune_gradient_based, tune_gradient_free, tune_joint, untrained_adapter, TuneMode, TuneResult};

/// Environment variable overriding the number of worker threads.
pub const WORKERS_ENV: &str = "LORA_RECYCLE_WORKERS";

pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Maps `f` over `items` on up to [`worker_count`] threads; output order
/// follows input order.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

/// Mixes the parts into one seed (splitmix64 finalizer over each part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// FNV-1a of a string, for mixing names into seeds.
pub fn name_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const SALT_DATA: u64 = 1;
const SALT_TARGET: u64 = 2;
const SALT_SELECT: u64 = 3;
const SALT_REINIT: u64 = 4;
const SALT_TUNE: u64 = 5;
const SALT_FRESH: u64 = 6;

/// Training settings for the target-task adapter of `task` under `seed`.
pub fn target_training(cfg: &ExperimentConfig, task: &str, seed: u64) -> LoraTrainConfig {
    LoraTrainConfig {
        seed: derive_seed(&[name_hash(task), seed, SALT_TARGET]),
        ..cfg.target_lora.clone()
    }
}

/// The task as generated for `seed`.
pub fn seeded_task(desc: &TaskDescriptor, seed: u64) -> TaskDescriptor {
    TaskDescriptor {
        seed: derive_seed(&[desc.seed, seed, SALT_DATA]),
        ..desc.clone()
    }
}

/// A target-task adapter and its task vectors.
#[derive(Debug, Clone)]
pub struct TargetAdapter {
    pub adapter: LoraAdapter,
    pub vectors: TaskVectorSet,
    pub test_accuracy: f64,
}

/// Data, baselines and target adapter for one `(task, seed)`.
#[derive(Debug)]
pub struct TaskEntry {
    pub descriptor: TaskDescriptor,
    pub data: TaskDataset,
    pub base_accuracy: f64,
    pub target: std::result::Result<TargetAdapter, String>,
    ranking: OnceLock<std::result::Result<SelectionResult, String>>,
}

impl TaskEntry {
    /// Every pool adapter ranked by accuracy on the labelled examples.
    fn ranking(&self, ws: &Workspace) -> Result<&SelectionResult> {
        self.ranking
            .get_or_init(|| {
                select_by_evaluation(&ws.pool_vectors, &ws.model, &self.data.labelled(), ws.pool_vectors.len())
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::arg(e.clone()))
    }
}

/// Everything an experiment reuses across cells: the base model, the pool
/// and per-task data with trained target adapters.
#[derive(Debug)]
pub struct Workspace {
    pub model: ToyModel,
    pub pool: Vec<LoraAdapter>,
    pub pool_vectors: Vec<TaskVectorSet>,
    entries: BTreeMap<(String, u64), TaskEntry>,
    fingerprint: Fingerprint,
}

#[derive(Debug, Clone, PartialEq)]
struct Fingerprint {
    model: ModelConfig,
    model_seed: u64,
    pool: PoolSpec,
    target_lora: LoraTrainConfig,
}

impl Fingerprint {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            model: cfg.model.clone(),
            model_seed: cfg.model_seed,
            pool: cfg.pool.clone(),
            target_lora: cfg.target_lora.clone(),
        }
    }
}

/// Loads every `*.safetensors` adapter in `dir`, in name order. Any
/// rejected file fails the whole load.
pub fn load_pool_dir(dir: &Path, cfg: &ModelConfig) -> Result<Vec<LoraAdapter>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Validation(format!("no adapters in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let raw = load_raw(&p)?;
        let report = validate_raw(&raw, cfg, DEFAULT_MAGNITUDE_CAP);
        if !report.accepted() {
            let reasons: Vec<String> = report.reasons.iter().map(|r| r.to_string()).collect();
            return Err(Error::Validation(format!("{}: {}", p.display(), reasons.join("; "))));
        }
        out.push(raw.into_adapter(cfg)?);
    }
    Ok(out)
}

impl Workspace {
    /// Builds the model and pool and trains a target adapter for every
    /// `(task, seed)` in `cfg`.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ToyModel::new(cfg.model.clone(), cfg.model_seed)?;
        let pool = match &cfg.pool {
            PoolSpec::Synthetic {
                tasks,
                ranks,
                coverages,
                train,
                seed,
            } => build_synthetic_pool(&model, tasks, ranks, coverages, train, *seed)?,
            PoolSpec::Directory { path } => load_pool_dir(path, &cfg.model)?,
        };
        let pool_vectors = pool.iter().map(materialize_task_vectors).collect::<Result<Vec<_>>>()?;
        let mut ws = Self {
            model,
            pool,
            pool_vectors,
            entries: BTreeMap::new(),
            fingerprint: Fingerprint::of(cfg),
        };
        ws.add_tasks(cfg)?;
        Ok(ws)
    }

    /// Prepares any `(task, seed)` of `cfg` not yet present.
    pub fn add_tasks(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        self.check(cfg)?;
        let mut jobs = Vec::new();
        for t in &cfg.tasks {
            for &s in &cfg.seeds {
                if !self.entries.contains_key(&(t.name.clone(), s)) {
                    jobs.push((t.clone(), s));
                }
            }
        }
        let model = &self.model;
        let built = parallel_map(&jobs, |(desc, seed)| -> Result<TaskEntry> {
            let data = generate_task(&seeded_task(desc, *seed))?;
            let base_accuracy = model.evaluate_accuracy(None, &data.test)?;
            let train_cfg = target_training(cfg, &desc.name, *seed);
            let target = train_target_lora(model, &data, &train_cfg)
                .and_then(|mut adapter| {
                    adapter.name = format!("target-{}", desc.name);
                    let vectors = materialize_task_vectors(&adapter)?;
                    let test_accuracy = model.evaluate_accuracy(Some(&vectors), &data.test)?;
                    Ok(TargetAdapter {
                        adapter,
                        vectors,
                        test_accuracy,
                    })
                })
                .map_err(|e| e.to_string());
            Ok(TaskEntry {
                descriptor: desc.clone(),
                data,
                base_accuracy,
                target,
                ranking: OnceLock::new(),
            })
        });
        for ((desc, seed), entry) in jobs.into_iter().zip(built) {
            self.entries.insert((desc.name, seed), entry?);
        }
        Ok(())
    }

    fn check(&self, cfg: &ExperimentConfig) -> Result<()> {
        if Fingerprint::of(cfg) != self.fingerprint {
            return Err(Error::Config(
                "experiment differs from the prepared workspace in model, pool or target training".into(),
            ));
        }
        for ((name, _), entry) in &self.entries {
            if let Some(t) = cfg.tasks.iter().find(|t| &t.name == name) {
                if *t != entry.descriptor {
                    return Err(Error::Config(format!("task `{name}` was prepared with a different descriptor")));
                }
            }
        }
        Ok(())
    }

    pub fn entry(&self, task: &str, seed: u64) -> Option<&TaskEntry> {
        self.entries.get(&(task.to_string(), seed))
    }

    pub fn pool_index(&self, name: &str) -> Option<usize> {
        self.pool.iter().position(|a| a.name == name)
    }
}

/// Selects, merges or tunes, and evaluates on the test split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ws = Workspace::prepare(cfg)?;
    run_experiment_with(&ws, cfg)
}

/// [`run_experiment`] against a prepared workspace.
pub fn run_experiment_with(ws: &Workspace, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    ws.check(cfg)?;
    let mut jobs = Vec::new();
    for ti in 0..cfg.tasks.len() {
        for mi in 0..cfg.methods.len() {
            for &k in &cfg.k_values {
                for &seed in &cfg.seeds {
                    jobs.push((ti, mi, k, seed));
                }
            }
        }
    }
    let cells = parallel_map(&jobs, |&(ti, mi, k, seed)| run_cell(ws, cfg, ti, mi, k, seed));
    let report = ExperimentReport::new(cfg.clone(), cells);
    if let Some(path) = &cfg.report_path {
        report.write(path)?;
    }
    Ok(report)
}

struct Outcome {
    accuracy: f64,
    selection: SelectionResult,
    constituents: Vec<String>,
    target_index: Option<usize>,
    tune: Option<TuneSummary>,
    distribution: Option<Vec<f64>>,
    overlay: TaskVectorSet,
}

/// One cell; failures are recorded on the returned record.
pub fn run_cell(ws: &Workspace, cfg: &ExperimentConfig, task: usize, method: usize, k: usize, seed: u64) -> CellRecord {
    run_cell_with_overlay(ws, cfg, task, method, k, seed).0
}

/// [`run_cell`], also returning the merged task vectors on success. For
/// joint tuning the overlay is the first run's.
pub fn run_cell_with_overlay(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    task: usize,
    method: usize,
    k: usize,
    seed: u64,
) -> (CellRecord, Option<TaskVectorSet>) {
    let desc = &cfg.tasks[task];
    let spec = &cfg.methods[method];
    let entry = ws.entry(&desc.name, seed);
    let mut record = CellRecord {
        task: desc.name.clone(),
        method: spec.name.clone(),
        k,
        seed,
        include_target_lora: cfg.include_target_lora,
        reinit_pool: cfg.reinit_pool,
        error: None,
        test_accuracy: None,
        base_accuracy: entry.map(|e| e.base_accuracy),
        target_accuracy: entry.and_then(|e| e.target.as_ref().ok().map(|t| t.test_accuracy)),
        selection: None,
        constituents: Vec::new(),
        target_index: None,
        tune: None,
        coefficient_distribution: None,
        config: cfg.cell(task, method, k, seed),
    };
    let outcome = match entry {
        None => Err(Error::Config(format!("task {} seed {seed} was not prepared", desc.name))),
        Some(entry) => execute(ws, cfg, desc, spec, entry, k, seed),
    };
    match outcome {
        Ok(o) => {
            record.test_accuracy = Some(o.accuracy);
            record.selection = Some(o.selection);
            record.constituents = o.constituents;
            record.target_index = o.target_index;
            record.tune = o.tune;
            record.coefficient_distribution = o.distribution;
            (record, Some(o.overlay))
        }
        Err(e) => {
            record.error = Some(e.to_string());
            (record, None)
        }
    }
}

fn execute(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    desc: &TaskDescriptor,
    spec: &MethodSpec,
    entry: &TaskEntry,
    k: usize,
    seed: u64,
) -> Result<Outcome> {
    let task_hash = name_hash(&desc.name);
    let target = entry.target.as_ref().map_err(|e| Error::Numeric(format!("target adapter: {e}")));
    let n_select = if cfg.include_target_lora {
        k.checked_sub(1).ok_or_else(|| Error::arg("k must be at least 1"))?
    } else {
        k
    };
    let selection = if n_select == 0 {
        SelectionResult {
            strategy: spec.selection,
            names: Vec::new(),
            scores: Vec::new(),
        }
    } else {
        match spec.selection {
            SelectionStrategy::Random => {
                let names: Vec<&str> = ws.pool.iter().map(|a| a.name.as_str()).collect();
                select_random(&names, n_select, derive_seed(&[seed, task_hash, SALT_SELECT]))?
            }
            SelectionStrategy::Evaluation => {
                if n_select > ws.pool.len() {
                    return Err(Error::arg(format!("cannot select {n_select} adapters from a pool of {}", ws.pool.len())));
                }
                let mut r = entry.ranking(ws)?.clone();
                r.names.truncate(n_select);
                r.scores.truncate(n_select);
                r
            }
            other => select_by_similarity(&ws.pool_vectors, &target.as_ref().map_err(clone_err)?.vectors, other, n_select)?,
        }
    };
    let mut adapters = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    for name in &selection.names {
        let i = ws.pool_index(name).ok_or_else(|| Error::arg(format!("selected adapter `{name}` not in pool")))?;
        if cfg.reinit_pool {
            let a = reinit_matched(&ws.pool[i], derive_seed(&[seed, task_hash, name_hash(name), SALT_REINIT]));
            vectors.push(materialize_task_vectors(&a)?);
            adapters.push(a);
        } else {
            adapters.push(ws.pool[i].clone());
            vectors.push(ws.pool_vectors[i].clone());
        }
    }
    let mut target_index = None;
    if cfg.include_target_lora {
        let t = target.as_ref().map_err(clone_err)?;
        target_index = Some(adapters.len());
        adapters.push(t.adapter.clone());
        vectors.push(t.vectors.clone());
    }
    let constituents: Vec<String> = adapters.iter().map(|a| a.name.clone()).collect();
    let refs: Vec<&TaskVectorSet> = vectors.iter().collect();
    let test = &entry.data.test;
    let model = &ws.model;
    let (accuracy, tune, distribution, overlay) = match &spec.combine {
        Combine::Merge { recipe } => {
            let merged = recipe.apply(&refs)?;
            (model.evaluate_accuracy(Some(&merged), test)?, None, None, merged)
        }
        Combine::Tune { tune } => {
            let tcfg = crate::tuner::TuneConfig {
                seed: derive_seed(&[seed, task_hash, SALT_TUNE]),
                ..tune.clone()
            };
            let (result, merged_sets): (TuneResult, Vec<TaskVectorSet>) = match tcfg.mode {
                TuneMode::GradBased | TuneMode::Single => (tune_gradient_based(model, &refs, &tcfg, &entry.data)?, vec![]),
                TuneMode::GradFree => (tune_gradient_free(model, &adapters, &tcfg, &entry.data)?, vec![]),
                TuneMode::Joint => {
                    let rank = adapters.iter().map(|a| a.rank).max().unwrap_or(cfg.target_lora.rank);
                    let fresh = untrained_adapter(model, "untrained", rank, derive_seed(&[seed, task_hash, SALT_FRESH]))?;
                    let mut all = adapters.clone();
                    all.push(fresh);
                    let sets = all.iter().map(materialize_task_vectors).collect::<Result<Vec<_>>>()?;
                    (tune_joint(model, &all, &tcfg, &entry.data)?, sets)
                }
            };
            let sets: Vec<&TaskVectorSet> = if merged_sets.is_empty() { refs.clone() } else { merged_sets.iter().collect() };
            let mut accs = Vec::with_capacity(result.runs.len());
            let mut first = None;
            for i in 0..result.runs.len() {
                let merged = result.merged(i, &sets)?;
                accs.push(model.evaluate_accuracy(Some(&merged), test)?);
                first.get_or_insert(merged);
            }
            let distribution = if result.adapter_names.len() >= 2 {
                Some(coefficient_distribution(&result.table(0))?)
            } else {
                None
            };
            let summary = TuneSummary {
                runs: result
                    .runs
                    .iter()
                    .map(|r| RunSummary {
                        lr: r.lr,
                        steps: r.history.len() - 1,
                        selected_step: r.selected_step,
                        initial_metric: r.history[0].metric,
                        best_metric: r.best_metric,
                    })
                    .collect(),
                wall_clock_secs: result.wall_clock_secs,
            };
            let overlay = first.expect("at least one tuning run");
            (super::report::mean(&accs), Some(summary), distribution, overlay)
        }
    };
    Ok(Outcome {
        accuracy,
        selection,
        constituents,
        target_index,
        tune,
        distribution,
        overlay,
    })
}

fn clone_err(e: &Error) -> Error {
    Error::Numeric(e.to_string())
}
