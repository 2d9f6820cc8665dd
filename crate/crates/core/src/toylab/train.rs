use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModulePath, ModuleType};
use super::model::{Batch, DeltaNodes, ToyModel};
use super::optim::{Optimizer, OptimizerKind};
use super::tasks::{generate_task, TaskDataset, TaskDescriptor};
use crate::adapter::{LoraAdapter, Variant};
use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::Mat;

/// Which projection types an adapter covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    #[default]
    Full,
    Attention,
    QueryValue,
}

impl Coverage {
    pub fn modules(self) -> &'static [ModuleType] {
        match self {
            Coverage::Full => &ModuleType::ALL,
            Coverage::Attention => &ModuleType::ATTENTION,
            Coverage::QueryValue => &[ModuleType::QProj, ModuleType::VProj],
        }
    }
}

/// Hyperparameters for training one adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraTrainConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub coverage: Coverage,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// `alpha / rank`; the scaling of the trained adapter.
    #[serde(default = "default_alpha_ratio")]
    pub alpha_ratio: f64,
}

fn default_alpha_ratio() -> f64 {
    2.0
}

impl Default for LoraTrainConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            steps: 400,
            lr: 3e-4,
            seed: 0,
            coverage: Coverage::Full,
            optimizer: OptimizerKind::default(),
            alpha_ratio: default_alpha_ratio(),
        }
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainedLora {
    pub adapter: LoraAdapter,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// 0 means the untouched initialization won.
    pub best_step: usize,
}

struct LoraParams {
    paths: Vec<ModulePath>,
    /// A, B interleaved per path.
    mats: Vec<Mat>,
    scaling: f64,
}

impl LoraParams {
    fn deltas_on(&self, tape: &mut Tape<f64>, trainable: bool) -> Result<(DeltaNodes, Vec<crate::tensor::NodeId>)> {
        let mut deltas = DeltaNodes::new();
        let mut leaves = Vec::with_capacity(self.mats.len());
        for (i, path) in self.paths.iter().enumerate() {
            let (a, b) = (&self.mats[2 * i], &self.mats[2 * i + 1]);
            let (a, b) = if trainable {
                (tape.param(a.clone()), tape.param(b.clone()))
            } else {
                (tape.constant(a.clone()), tape.constant(b.clone()))
            };
            leaves.push(a);
            leaves.push(b);
            let ba = tape.matmul(b, a)?;
            deltas.insert(*path, tape.scale(ba, self.scaling));
        }
        Ok((deltas, leaves))
    }

    fn loss(&self, model: &ToyModel, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (deltas, _) = self.deltas_on(&mut tape, false)?;
        let loss = model.loss_node(&mut tape, batch, &deltas)?;
        Ok(tape.scalar(loss))
    }
}

/// Full-batch training of a fresh adapter on `data.train`, keeping the
/// snapshot with the lowest validation loss (the initialization included).
pub fn train_lora(model: &ToyModel, data: &TaskDataset, cfg: &LoraTrainConfig) -> Result<TrainedLora> {
    if cfg.rank == 0 {
        return Err(Error::arg("adapter rank must be at least 1"));
    }
    if cfg.steps == 0 {
        return Err(Error::arg("training needs at least one step"));
    }
    let mc = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let modules: BTreeSet<ModuleType> = cfg.coverage.modules().iter().copied().collect();
    let paths: Vec<ModulePath> = mc.module_paths().into_iter().filter(|p| modules.contains(&p.module)).collect();
    let mut mats = Vec::with_capacity(2 * paths.len());
    for p in &paths {
        let (n, m) = mc.module_shape(p.module);
        let bound = 1.0 / (m as f64).sqrt();
        mats.push(Mat::from_fn(cfg.rank, m, |_, _| rng.random_range(-bound..bound)));
        mats.push(Mat::zeros(n, cfg.rank));
    }
    let alpha = cfg.alpha_ratio * cfg.rank as f64;
    let mut params = LoraParams {
        paths,
        mats,
        scaling: Variant::Standard.scaling(alpha, cfg.rank),
    };

    let train = Batch::new(&data.train, mc)?;
    let val = Batch::new(&data.validation, mc)?;
    let initial_val_loss = params.loss(model, &val)?;
    let mut best = (initial_val_loss, 0usize, params.mats.clone());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &params.mats)?;
    for step in 1..=cfg.steps {
        let mut tape = Tape::new();
        let (deltas, leaves) = params.deltas_on(&mut tape, true)?;
        let loss = model.loss_node(&mut tape, &train, &deltas)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Mat> = leaves
            .iter()
            .map(|&id| grads.take(id).expect("leaf gradient"))
            .collect();
        opt.step(&mut params.mats, &grads)?;
        let v = params.loss(model, &val)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged at step {step}")));
        }
        if v < best.0 {
            best = (v, step, params.mats.clone());
        }
    }

    let (best_val_loss, best_step, mats) = best;
    let pairs = params
        .paths
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, mats[2 * i].clone(), mats[2 * i + 1].clone()));
    let mut adapter = LoraAdapter::new(data.name.clone(), alpha, cfg.rank, Variant::Standard, pairs)?.quantized();
    adapter.metadata.insert("source".into(), "toy-lab".into());
    adapter.metadata.insert("task".into(), data.name.clone());
    adapter.metadata.insert("best_step".into(), best_step.to_string());
    Ok(TrainedLora {
        adapter,
        initial_val_loss,
        best_val_loss,
        best_step,
    })
}

/// [`train_lora`] returning only the adapter.
pub fn train_target_lora(model: &ToyModel, data: &TaskDataset, cfg: &LoraTrainConfig) -> Result<LoraAdapter> {
    Ok(train_lora(model, data, cfg)?.adapter)
}

/// Trains one adapter per descriptor. Adapter `i` uses `ranks[i % len]` and
/// `coverages[i % len]`; names are made unique by suffixing duplicates.
pub fn build_synthetic_pool(
    model: &ToyModel,
    descriptors: &[TaskDescriptor],
    ranks: &[usize],
    coverages: &[Coverage],
    base: &LoraTrainConfig,
    seed: u64,
) -> Result<Vec<LoraAdapter>> {
    if descriptors.is_empty() || ranks.is_empty() || coverages.is_empty() {
        return Err(Error::arg("pool construction needs descriptors, ranks and coverages"));
    }
    let mut names = BTreeSet::new();
    let mut pool = Vec::with_capacity(descriptors.len());
    for (i, desc) in descriptors.iter().enumerate() {
        let data = generate_task(desc)?;
        let cfg = LoraTrainConfig {
            rank: ranks[i % ranks.len()],
            coverage: coverages[i % coverages.len()],
            seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            ..base.clone()
        };
        let mut adapter = train_target_lora(model, &data, &cfg)?;
        let mut name = desc.name.clone();
        let mut suffix = 1;
        while !names.insert(name.clone()) {
            name = format!("{}-{suffix}", desc.name);
            suffix += 1;
        }
        adapter.name = name;
        pool.push(adapter);
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::ModelConfig;

    fn tiny() -> (ToyModel, TaskDataset) {
        let cfg = ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq: 4,
        };
        let model = ToyModel::new(cfg, 0).unwrap();
        let desc = TaskDescriptor::modular_add(3, 1).with_vocab(16);
        (model, generate_task(&desc).unwrap())
    }

    #[test]
    fn zero_steps_is_rejected() {
        let (model, data) = tiny();
        let cfg = LoraTrainConfig {
            steps: 0,
            ..LoraTrainConfig::default()
        };
        assert!(matches!(train_lora(&model, &data, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn best_checkpoint_never_worse_than_start() {
        let (model, data) = tiny();
        let cfg = LoraTrainConfig {
            rank: 2,
            steps: 5,
            lr: 1e-2,
            ..LoraTrainConfig::default()
        };
        let run = train_lora(&model, &data, &cfg).unwrap();
        assert!(run.best_val_loss <= run.initial_val_loss);
        assert_eq!(run.adapter.modules.len(), 7);
        let again = train_lora(&model, &data, &cfg).unwrap();
        assert_eq!(again.adapter, run.adapter);
    }

    #[test]
    fn overflowing_model_reports_divergence() {
        let (mut model, data) = tiny();
        model.head = model.head.map(|x| x * 1e308);
        let cfg = LoraTrainConfig {
            rank: 2,
            steps: 3,
            ..LoraTrainConfig::default()
        };
        match train_lora(&model, &data, &cfg) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step 1"), "{msg}"),
            Err(other) => panic!("expected divergence, got {other}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn pool_respects_assignment() {
        let (model, _) = tiny();
        let descs: Vec<_> = (0..3).map(|i| TaskDescriptor::modular_add(3, i).with_vocab(16)).collect();
        let base = LoraTrainConfig {
            steps: 1,
            ..LoraTrainConfig::default()
        };
        let pool = build_synthetic_pool(&model, &descs, &[1, 2], &[Coverage::Full, Coverage::Attention], &base, 0).unwrap();
        let names: BTreeSet<_> = pool.iter().map(|a| a.name.clone()).collect();
        assert_eq!(names.len(), 3);
        assert_eq!(pool.iter().map(|a| a.rank).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert!(pool[1].modules.keys().all(|p| p.module.is_attention()));
    }
}
