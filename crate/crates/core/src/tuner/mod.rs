//! Fitting merging coefficients (and optionally adapter weights) on a
//! target task's labelled examples.

mod es;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use es::{EvolutionStrategy, EsState};

use crate::adapter::{materialize_task_vectors, pad_to_rank, LoraAdapter, TaskVectorSet, Variant};
use crate::error::{Error, Result};
use crate::merge::{Activation, CoefficientInit, CoefficientTable, Granularity};
use crate::tensor::{NodeId, Tape};
use crate::toylab::{Batch, DeltaNodes, Example, ModulePath, Optimizer, OptimizerKind, TaskDataset, ToyModel};
use crate::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    GradBased,
    GradFree,
    Joint,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    /// Lowest loss on the validation split.
    BestValLoss,
    /// Lowest loss on train and validation together.
    BestTrainLossFull100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub mode: TuneMode,
    pub steps: usize,
    /// One run per entry; only joint mode takes more than one.
    pub lrs: Vec<f64>,
    pub granularity: Granularity,
    pub activation: Activation,
    pub init: CoefficientInit,
    pub checkpoint: CheckpointRule,
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Weight of an L1 penalty on the coefficients in gradient-free mode.
    #[serde(default)]
    pub l1_penalty: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::adam()
}

impl TuneConfig {
    /// 100 full-batch steps at lr 5e-2, best validation loss.
    pub fn grad_based(granularity: Granularity, activation: Activation, init: CoefficientInit) -> Self {
        Self {
            mode: TuneMode::GradBased,
            steps: 100,
            lrs: vec![5e-2],
            granularity,
            activation,
            init,
            checkpoint: CheckpointRule::BestValLoss,
            seed: 0,
            optimizer: default_optimizer(),
            l1_penalty: 0.0,
        }
    }

    /// Per-module leaky-ReLU coefficients for one adapter, from zero.
    pub fn single() -> Self {
        Self {
            mode: TuneMode::Single,
            ..Self::grad_based(Granularity::Module, Activation::LeakyRelu, CoefficientInit::Zeros)
        }
    }

    /// Black-box search over one linear coefficient per adapter.
    pub fn grad_free() -> Self {
        Self {
            mode: TuneMode::GradFree,
            steps: 100,
            lrs: vec![],
            granularity: Granularity::Model,
            activation: Activation::Linear,
            init: CoefficientInit::Zeros,
            checkpoint: CheckpointRule::BestTrainLossFull100,
            seed: 0,
            optimizer: default_optimizer(),
            l1_penalty: 0.0,
        }
    }

    /// Softmax module coefficients trained together with the adapters.
    pub fn joint() -> Self {
        Self {
            mode: TuneMode::Joint,
            lrs: vec![1e-4, 5e-5],
            ..Self::grad_based(Granularity::Module, Activation::Softmax, CoefficientInit::Zeros)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_optimizer(mut self, optimizer: OptimizerKind) -> Self {
        self.optimizer = optimizer;
        self
    }

    fn validate(&self, expected: &[TuneMode]) -> Result<()> {
        if !expected.contains(&self.mode) {
            return Err(Error::arg(format!("tuner called with mode {:?}", self.mode)));
        }
        if self.steps == 0 {
            return Err(Error::arg("tuning needs at least one step"));
        }
        if self.mode != TuneMode::GradFree {
            if self.lrs.is_empty() {
                return Err(Error::arg("gradient-based tuning needs a learning rate"));
            }
            if self.mode != TuneMode::Joint && self.lrs.len() != 1 {
                return Err(Error::arg("only joint tuning accepts several learning rates"));
            }
        }
        Ok(())
    }
}

/// One recorded optimization step; step 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Value of the configured checkpoint metric.
    pub metric: f64,
}

/// One optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRun {
    pub lr: Option<f64>,
    pub raw: Mat,
    pub history: Vec<StepRecord>,
    pub selected_step: usize,
    pub best_metric: f64,
    /// Tuned adapters (joint mode), in input order.
    #[serde(skip)]
    pub adapters: Option<Vec<LoraAdapter>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: TuneConfig,
    pub adapter_names: Vec<String>,
    pub n_layers: usize,
    pub runs: Vec<TuneRun>,
    pub wall_clock_secs: f64,
}

impl TuneResult {
    /// Best table of run `i`.
    pub fn table(&self, i: usize) -> CoefficientTable {
        CoefficientTable {
            raw: self.runs[i].raw.clone(),
            granularity: self.config.granularity,
            activation: self.config.activation,
            n_layers: self.n_layers,
        }
    }

    /// The merged task vector of run `i`. `sets` must be the tuner's inputs,
    /// unless the run carries its own tuned adapters.
    pub fn merged(&self, i: usize, sets: &[&TaskVectorSet]) -> Result<TaskVectorSet> {
        let own;
        let sets: Vec<&TaskVectorSet> = match &self.runs[i].adapters {
            Some(adapters) => {
                own = adapters.iter().map(materialize_task_vectors).collect::<Result<Vec<_>>>()?;
                own.iter().collect()
            }
            None => sets.to_vec(),
        };
        crate::merge::combine(&sets, &self.table(i))
    }
}

/// Delta nodes `Σ_i act[i, g(p)] · term_i[p]` for every module any term covers.
fn merged_nodes(
    tape: &mut Tape<f64>,
    raw: NodeId,
    activation: Activation,
    granularity: Granularity,
    terms: &[Vec<(ModulePath, NodeId)>],
    model: &ToyModel,
) -> Result<DeltaNodes> {
    let act = activation.on_tape(tape, raw);
    let mut by_path: std::collections::BTreeMap<ModulePath, Vec<(usize, NodeId)>> = Default::default();
    for (i, entries) in terms.iter().enumerate() {
        for &(p, node) in entries {
            by_path.entry(p).or_default().push((i, node));
        }
    }
    let mut out = DeltaNodes::new();
    for (p, ts) in by_path {
        let shape = model.config.module_shape(p.module);
        let node = tape.weighted_sum(act, granularity.group_of(p), ts, shape)?;
        out.insert(p, node);
    }
    Ok(out)
}

fn constant_terms(tape: &mut Tape<f64>, sets: &[&TaskVectorSet]) -> Vec<Vec<(ModulePath, NodeId)>> {
    sets.iter()
        .map(|t| t.deltas.iter().map(|(p, d)| (*p, tape.constant(d.clone()))).collect())
        .collect()
}

/// Loss of the merge described by `table`, and its gradient with respect to
/// the raw coefficients.
pub fn merged_loss_and_grad(
    model: &ToyModel,
    sets: &[&TaskVectorSet],
    table: &CoefficientTable,
    examples: &[Example],
) -> Result<(f64, Mat)> {
    let batch = Batch::new(examples, &model.config)?;
    let mut tape = Tape::new();
    let terms = constant_terms(&mut tape, sets);
    let raw = tape.param(table.raw.clone());
    let deltas = merged_nodes(&mut tape, raw, table.activation, table.granularity, &terms, model)?;
    let loss = model.loss_node(&mut tape, &batch, &deltas)?;
    let mut grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads.take(raw).expect("coefficient gradient")))
}

/// Loss of the merge described by `table`, without gradients.
pub fn merged_loss(model: &ToyModel, sets: &[&TaskVectorSet], table: &CoefficientTable, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let terms = constant_terms(&mut tape, sets);
    let raw = tape.constant(table.raw.clone());
    let deltas = merged_nodes(&mut tape, raw, table.activation, table.granularity, &terms, model)?;
    let loss = model.loss_node(&mut tape, &batch, &deltas)?;
    Ok(tape.scalar(loss))
}

struct Splits {
    train: Batch,
    val: Batch,
    full: Batch,
}

impl Splits {
    fn new(model: &ToyModel, data: &TaskDataset) -> Result<Self> {
        Ok(Self {
            train: Batch::new(&data.train, &model.config)?,
            val: Batch::new(&data.validation, &model.config)?,
            full: Batch::new(&data.labelled(), &model.config)?,
        })
    }
}

fn n_layers_of(model: &ToyModel) -> usize {
    model.config.n_layers
}

fn check_sets(model: &ToyModel, sets: &[&TaskVectorSet]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::arg("tuning needs at least one adapter"));
    }
    for s in sets {
        s.check_shapes(&model.config)?;
    }
    Ok(())
}

/// Gradient descent on the raw coefficients only; base weights and the
/// task vectors stay fixed.
pub fn tune_gradient_based(
    model: &ToyModel,
    sets: &[&TaskVectorSet],
    cfg: &TuneConfig,
    data: &TaskDataset,
) -> Result<TuneResult> {
    cfg.validate(&[TuneMode::GradBased, TuneMode::Single])?;
    check_sets(model, sets)?;
    let start = Instant::now();
    let splits = Splits::new(model, data)?;
    let table = CoefficientTable::<f64>::new(sets.len(), n_layers_of(model), cfg.granularity, cfg.activation, cfg.init);
    let run = coefficient_descent(model, sets, cfg, cfg.lrs[0], table.raw, &splits)?;
    Ok(TuneResult {
        config: cfg.clone(),
        adapter_names: sets.iter().map(|s| s.name.clone()).collect(),
        n_layers: n_layers_of(model),
        runs: vec![run],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-module scaling of a single adapter.
pub fn tune_single(model: &ToyModel, set: &TaskVectorSet, cfg: &TuneConfig, data: &TaskDataset) -> Result<TuneResult> {
    cfg.validate(&[TuneMode::Single])?;
    tune_gradient_based(model, &[set], cfg, data)
}

fn coefficient_descent(
    model: &ToyModel,
    sets: &[&TaskVectorSet],
    cfg: &TuneConfig,
    lr: f64,
    init: Mat,
    splits: &Splits,
) -> Result<TuneRun> {
    let mut params = vec![init];
    let mut opt = Optimizer::new(cfg.optimizer, lr, &params)?;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f64, usize, Mat)> = None;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let terms = constant_terms(&mut tape, sets);
        let raw = tape.param(params[0].clone());
        let deltas = merged_nodes(&mut tape, raw, cfg.activation, cfg.granularity, &terms, model)?;
        let loss = model.loss_node(&mut tape, &splits.train, &deltas)?;
        let train_loss = tape.scalar(loss);
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("tuning loss became non-finite at step {step}")));
        }
        let table = CoefficientTable {
            raw: params[0].clone(),
            granularity: cfg.granularity,
            activation: cfg.activation,
            n_layers: n_layers_of(model),
        };
        let val_loss = merged_loss(model, sets, &table, &splits.val)?;
        let metric = match cfg.checkpoint {
            CheckpointRule::BestValLoss => val_loss,
            CheckpointRule::BestTrainLossFull100 => merged_loss(model, sets, &table, &splits.full)?,
        };
        history.push(StepRecord {
            step,
            train_loss,
            val_loss: Some(val_loss),
            metric,
        });
        if best.as_ref().is_none_or(|b| metric < b.0) {
            best = Some((metric, step, params[0].clone()));
        }
        if step < cfg.steps {
            let mut grads = tape.backward(loss)?;
            let g = grads.take(raw).expect("coefficient gradient");
            opt.step(&mut params, &[g])?;
        }
    }
    let (best_metric, selected_step, raw) = best.expect("at least one step recorded");
    Ok(TuneRun {
        lr: Some(lr),
        raw,
        history,
        selected_step,
        best_metric,
        adapters: None,
    })
}

/// Black-box search over one coefficient per adapter, minimizing the mean
/// loss over all labelled examples. Adapters are rank-padded first.
pub fn tune_gradient_free(
    model: &ToyModel,
    adapters: &[LoraAdapter],
    cfg: &TuneConfig,
    data: &TaskDataset,
) -> Result<TuneResult> {
    cfg.validate(&[TuneMode::GradFree])?;
    let start = Instant::now();
    if adapters.is_empty() {
        return Err(Error::arg("tuning needs at least one adapter"));
    }
    let r_max = adapters.iter().map(|a| a.rank).max().unwrap_or(1);
    let sets = adapters
        .iter()
        .map(|a| materialize_task_vectors(&pad_to_rank(a, r_max)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TaskVectorSet> = sets.iter().collect();
    check_sets(model, &refs)?;
    let k = refs.len();
    let n_layers = n_layers_of(model);
    let full = Batch::new(&data.labelled(), &model.config)?;
    let objective = |x: &[f64]| -> Result<f64> {
        let table = CoefficientTable::from_raw(
            Mat::from_vec(k, 1, x.to_vec())?,
            n_layers,
            Granularity::Model,
            Activation::Linear,
        )?;
        let loss = merged_loss(model, &refs, &table, &full)?;
        Ok(loss + cfg.l1_penalty * x.iter().map(|v| v.abs()).sum::<f64>())
    };
    let init = CoefficientTable::<f64>::new(k, n_layers, Granularity::Model, Activation::Linear, cfg.init);
    let es = EvolutionStrategy::new(k);
    let mut state = es.start(init.raw.as_slice().to_vec(), &objective, cfg.seed)?;
    let mut history = vec![StepRecord {
        step: 0,
        train_loss: state.best_value,
        val_loss: None,
        metric: state.best_value,
    }];
    for step in 1..=cfg.steps {
        let generation_best = es.generation(&mut state, &objective)?;
        history.push(StepRecord {
            step,
            train_loss: generation_best,
            val_loss: None,
            metric: state.best_value,
        });
    }
    let selected_step = history
        .iter()
        .position(|h| h.metric == state.best_value)
        .expect("best value appears in history");
    Ok(TuneResult {
        config: TuneConfig {
            granularity: Granularity::Model,
            activation: Activation::Linear,
            ..cfg.clone()
        },
        adapter_names: adapters.iter().map(|a| a.name.clone()).collect(),
        n_layers,
        runs: vec![TuneRun {
            lr: None,
            raw: Mat::from_vec(k, 1, state.best.clone())?,
            history,
            selected_step,
            best_metric: state.best_value,
            adapters: None,
        }],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// A fresh adapter over every module of `model`: uniform A, zero B.
pub fn untrained_adapter(model: &ToyModel, name: &str, rank: usize, seed: u64) -> Result<LoraAdapter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<_> = model
        .config
        .module_paths()
        .into_iter()
        .map(|p| {
            let (n, m) = model.config.module_shape(p.module);
            let bound = 1.0 / (m as f64).sqrt();
            let a = Mat::from_fn(rank, m, |_, _| rng.random_range(-bound..bound));
            (p, a, Mat::zeros(n, rank))
        })
        .collect();
    Ok(LoraAdapter::new(name, 2.0 * rank as f64, rank, Variant::Standard, pairs)?.quantized())
}

/// Coefficients and adapter weights trained together, one run per learning
/// rate. The caller appends the untrained adapter to `adapters`.
pub fn tune_joint(model: &ToyModel, adapters: &[LoraAdapter], cfg: &TuneConfig, data: &TaskDataset) -> Result<TuneResult> {
    cfg.validate(&[TuneMode::Joint])?;
    if cfg.activation != Activation::Softmax {
        return Err(Error::arg("joint tuning uses softmax coefficients"));
    }
    if adapters.is_empty() {
        return Err(Error::arg("tuning needs at least one adapter"));
    }
    for a in adapters {
        a.check_shapes(&model.config)?;
    }
    let start = Instant::now();
    let splits = Splits::new(model, data)?;
    let n_layers = n_layers_of(model);
    let k = adapters.len();
    let mut runs = Vec::with_capacity(cfg.lrs.len());
    for &lr in &cfg.lrs {
        // Parameter layout: [raw, A₀, B₀, A₁, B₁, ...] in adapter/module order.
        let init = CoefficientTable::<f64>::new(k, n_layers, cfg.granularity, cfg.activation, cfg.init);
        let mut params = vec![init.raw];
        let mut layout = Vec::with_capacity(k);
        for a in adapters {
            let mut entries = Vec::with_capacity(a.modules.len());
            for (p, pair) in &a.modules {
                entries.push((*p, pair.scaling, params.len()));
                params.push(pair.a.clone());
                params.push(pair.b.clone());
            }
            layout.push(entries);
        }
        let mut opt = Optimizer::new(cfg.optimizer, lr, &params)?;
        let mut history = Vec::with_capacity(cfg.steps + 1);
        let mut best: Option<(f64, usize, Vec<Mat>)> = None;
        for step in 0..=cfg.steps {
            let record = |tape: &mut Tape<f64>, params: &[Mat], trainable: bool| -> Result<(NodeId, Vec<NodeId>, DeltaNodes)> {
                let leaf = |tape: &mut Tape<f64>, m: &Mat| {
                    if trainable {
                        tape.param(m.clone())
                    } else {
                        tape.constant(m.clone())
                    }
                };
                let raw = leaf(tape, &params[0]);
                let mut leaves = vec![raw];
                let mut terms = Vec::with_capacity(k);
                for entries in &layout {
                    let mut t = Vec::with_capacity(entries.len());
                    for &(p, s, idx) in entries {
                        let a = leaf(tape, &params[idx]);
                        let b = leaf(tape, &params[idx + 1]);
                        leaves.push(a);
                        leaves.push(b);
                        let ba = tape.matmul(b, a)?;
                        t.push((p, tape.scale(ba, s)));
                    }
                    terms.push(t);
                }
                let deltas = merged_nodes(tape, raw, cfg.activation, cfg.granularity, &terms, model)?;
                Ok((raw, leaves, deltas))
            };
            let mut tape = Tape::new();
            let (_, leaves, deltas) = record(&mut tape, &params, true)?;
            let loss = model.loss_node(&mut tape, &splits.train, &deltas)?;
            let train_loss = tape.scalar(loss);
            if !train_loss.is_finite() {
                return Err(Error::Numeric(format!("joint tuning loss became non-finite at step {step}")));
            }
            let eval = |batch: &Batch| -> Result<f64> {
                let mut t = Tape::new();
                let (_, _, d) = record(&mut t, &params, false)?;
                let l = model.loss_node(&mut t, batch, &d)?;
                Ok(t.scalar(l))
            };
            let val_loss = eval(&splits.val)?;
            let metric = match cfg.checkpoint {
                CheckpointRule::BestValLoss => val_loss,
                CheckpointRule::BestTrainLossFull100 => eval(&splits.full)?,
            };
            history.push(StepRecord {
                step,
                train_loss,
                val_loss: Some(val_loss),
                metric,
            });
            if best.as_ref().is_none_or(|b| metric < b.0) {
                best = Some((metric, step, params.clone()));
            }
            if step < cfg.steps {
                let mut grads = tape.backward(loss)?;
                let g: Vec<Mat> = leaves.iter().map(|&id| grads.take(id).expect("leaf gradient")).collect();
                opt.step(&mut params, &g)?;
            }
        }
        let (best_metric, selected_step, best_params) = best.expect("at least one step recorded");
        let tuned = adapters
            .iter()
            .zip(&layout)
            .map(|(a, entries)| {
                let mut out = a.clone();
                for &(p, _, idx) in entries {
                    let pair = out.modules.get_mut(&p).expect("module present");
                    pair.a = best_params[idx].clone();
                    pair.b = best_params[idx + 1].clone();
                }
                out
            })
            .collect();
        runs.push(TuneRun {
            lr: Some(lr),
            raw: best_params[0].clone(),
            history,
            selected_step,
            best_metric,
            adapters: Some(tuned),
        });
    }
    Ok(TuneResult {
        config: cfg.clone(),
        adapter_names: adapters.iter().map(|a| a.name.clone()).collect(),
        n_layers,
        runs,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
