use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{Activation, CoefficientInit, Granularity, MergeRecipe};
use crate::selection::SelectionStrategy;
use crate::toylab::{Coverage, LoraTrainConfig, ModelConfig, OptimizerKind, TaskDescriptor};
use crate::tuner::{TuneConfig, TuneMode};

/// Where the candidate adapters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PoolSpec {
    /// Adapters trained on the given source tasks.
    Synthetic {
        tasks: Vec<TaskDescriptor>,
        ranks: Vec<usize>,
        coverages: Vec<Coverage>,
        train: LoraTrainConfig,
        seed: u64,
    },
    /// Every `*.safetensors` file in a directory.
    Directory { path: PathBuf },
}

/// How the selected task vectors become one overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Combine {
    Merge { recipe: MergeRecipe },
    Tune { tune: TuneConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFields {
    pub name: String,
    pub selection: SelectionStrategy,
    pub combine: Combine,
}

/// A selection strategy paired with a merge or tuning procedure. In a config
/// file a method is either a preset name or a full object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MethodEntry", into = "MethodFields")]
pub struct MethodSpec {
    pub name: String,
    pub selection: SelectionStrategy,
    pub combine: Combine,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MethodEntry {
    Preset(String),
    Full(MethodFields),
}

impl TryFrom<MethodEntry> for MethodSpec {
    type Error = Error;

    fn try_from(entry: MethodEntry) -> Result<Self> {
        match entry {
            MethodEntry::Preset(name) => MethodSpec::preset(&name),
            MethodEntry::Full(f) => Ok(MethodSpec {
                name: f.name,
                selection: f.selection,
                combine: f.combine,
            }),
        }
    }
}

impl From<MethodSpec> for MethodFields {
    fn from(m: MethodSpec) -> Self {
        MethodFields {
            name: m.name,
            selection: m.selection,
            combine: m.combine,
        }
    }
}

pub const PRESETS: [&str; 7] = ["simple_average", "ties", "tsv", "adamerging", "pi_tuning", "lorahub", "ours"];

impl MethodSpec {
    pub fn new(name: impl Into<String>, selection: SelectionStrategy, combine: Combine) -> Self {
        Self {
            name: name.into(),
            selection,
            combine,
        }
    }

    pub fn merge(name: impl Into<String>, selection: SelectionStrategy, recipe: MergeRecipe) -> Self {
        Self::new(name, selection, Combine::Merge { recipe })
    }

    pub fn tune(name: impl Into<String>, selection: SelectionStrategy, tune: TuneConfig) -> Self {
        Self::new(name, selection, Combine::Tune { tune })
    }

    /// The named baseline or adaptive method.
    pub fn preset(name: &str) -> Result<Self> {
        use SelectionStrategy::*;
        Ok(match name {
            "simple_average" => Self::merge(name, Random, MergeRecipe::SimpleAverage),
            "ties" => Self::merge(
                name,
                Random,
                MergeRecipe::Ties {
                    prune_frac: 0.2,
                    coeff: None,
                },
            ),
            "tsv" => Self::merge(name, Random, MergeRecipe::Tsv { q: 8, weight: None }),
            "adamerging" => Self::tune(
                name,
                Random,
                TuneConfig::grad_based(Granularity::Module, Activation::Linear, CoefficientInit::OneOverK),
            ),
            "pi_tuning" => Self::tune(name, QuasiFim, TuneConfig::joint()),
            "lorahub" => Self::tune(name, Random, TuneConfig::grad_free()),
            "ours" => Self::ours(Granularity::Module, Evaluation, Activation::LeakyRelu),
            other => {
                return Err(Error::Config(format!(
                    "unknown method preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Gradient-based tuning from zero with the given design choices.
    pub fn ours(granularity: Granularity, selection: SelectionStrategy, activation: Activation) -> Self {
        Self::tune(
            "ours",
            selection,
            TuneConfig::grad_based(granularity, activation, CoefficientInit::Zeros),
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn tune_config(&self) -> Option<&TuneConfig> {
        match &self.combine {
            Combine::Tune { tune } => Some(tune),
            Combine::Merge { .. } => None,
        }
    }

    /// Applies `f` to the tuning config, if any.
    pub fn map_tune(mut self, f: impl FnOnce(&mut TuneConfig)) -> Self {
        if let Combine::Tune { tune } = &mut self.combine {
            f(tune);
        }
        self
    }
}

/// One experiment: every `(task, method, k, seed)` cell is run once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub tasks: Vec<TaskDescriptor>,
    pub pool: PoolSpec,
    /// Training recipe for the per-task adapter.
    pub target_lora: LoraTrainConfig,
    pub methods: Vec<MethodSpec>,
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub include_target_lora: bool,
    #[serde(default)]
    pub reinit_pool: bool,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub report_path: Option<PathBuf>,
    /// Relative-improvement bucket edges for the summary.
    #[serde(default = "default_buckets")]
    pub bucket_thresholds: Vec<f64>,
}

fn default_buckets() -> Vec<f64> {
    vec![0.01, 0.05]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.tasks.is_empty() {
            return bad("no tasks");
        }
        if self.methods.is_empty() {
            return bad("no methods");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return bad("k values must be non-empty and positive");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        let mut names: Vec<_> = self.tasks.iter().map(|t| &t.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.tasks.len() {
            return bad("task names must be unique");
        }
        let mut methods: Vec<_> = self.methods.iter().map(|m| &m.name).collect();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("method names must be unique");
        }
        for t in &self.tasks {
            if t.vocab != self.model.vocab {
                return Err(Error::Config(format!(
                    "task {} uses vocabulary {} but the model has {}",
                    t.name, t.vocab, self.model.vocab
                )));
            }
        }
        for m in &self.methods {
            if let Some(t) = m.tune_config() {
                if t.mode == TuneMode::Single {
                    return Err(Error::Config(format!("method {}: single mode is not a merging method", m.name)));
                }
            }
        }
        Ok(())
    }

    /// The same experiment restricted to one cell.
    pub fn cell(&self, task: usize, method: usize, k: usize, seed: u64) -> Self {
        Self {
            tasks: vec![self.tasks[task].clone()],
            methods: vec![self.methods[method].clone()],
            k_values: vec![k],
            seeds: vec![seed],
            report_path: None,
            ..self.clone()
        }
    }

    /// Desk-scale defaults: the planted-relevance suite, a 40-adapter pool,
    /// `k ∈ {2, 5, 10}` and three seeds.
    pub fn desk_scale() -> Self {
        let model = desk_model();
        Self {
            tasks: planted_suite(model.vocab),
            pool: planted_pool(model.vocab),
            target_lora: desk_lora_training(),
            methods: PRESETS.iter().map(|p| MethodSpec::preset(p).expect("known preset")).collect(),
            k_values: vec![2, 5, 10],
            include_target_lora: false,
            reinit_pool: false,
            seeds: vec![0, 1, 2],
            report_path: None,
            bucket_thresholds: default_buckets(),
            model,
            model_seed: 7,
        }
    }
}

/// Small decoder used for desk-scale runs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab: 64,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq: 8,
    }
}

pub fn desk_lora_training() -> LoraTrainConfig {
    LoraTrainConfig {
        rank: 8,
        steps: 300,
        lr: 3e-3,
        seed: 0,
        coverage: Coverage::Full,
        optimizer: OptimizerKind::adam(),
        alpha_ratio: 2.0,
    }
}

const PLANTED_CLASSES: i64 = 4;
const PLANTED_KEYS: i64 = 16;
const PLANTED_PERTURB: i64 = 600;
const PLANTED_WORLDS: [i64; 4] = [1, 2, 3, 4];

fn projection(name: String, vocab: usize, world: i64, variant: i64, seed: u64) -> TaskDescriptor {
    TaskDescriptor::new(
        name,
        "projection-classify",
        &[
            ("classes", PLANTED_CLASSES),
            ("keys", PLANTED_KEYS),
            ("context", 2),
            ("world", world),
            ("variant", variant),
            ("perturb", PLANTED_PERTURB),
        ],
        seed,
    )
    .with_vocab(vocab)
}

/// Twelve key-to-label tasks: three perturbed variants of each of four
/// latent worlds.
pub fn planted_suite(vocab: usize) -> Vec<TaskDescriptor> {
    let mut out = Vec::new();
    for &w in &PLANTED_WORLDS {
        for v in 0..3 {
            out.push(projection(format!("planted-w{w}-v{v}"), vocab, w, v, 100 + (w * 10 + v) as u64));
        }
    }
    out
}

/// Forty source tasks: twenty sharing a world with the suite, ten from
/// unrelated worlds and families, and ten trained on random labels.
pub fn planted_pool(vocab: usize) -> PoolSpec {
    let mut tasks = Vec::new();
    for &w in &PLANTED_WORLDS {
        for v in 10..15 {
            tasks.push(projection(format!("near-w{w}-v{v}"), vocab, w, v, 1000 + (w * 100 + v) as u64));
        }
    }
    for w in 21..27 {
        tasks.push(projection(format!("far-w{w}"), vocab, w, 0, 2000 + w as u64));
    }
    let other = |name: &str, family: &str, params: &[(&str, i64)], seed: u64| {
        TaskDescriptor::new(name, family, params, seed).with_vocab(vocab)
    };
    tasks.push(other("far-modular-add-7", "modular-add", &[("modulus", 7)], 3001));
    tasks.push(other("far-copy-3", "copy", &[("len", 3), ("alphabet", 8)], 3002));
    tasks.push(other("far-reverse-3", "reverse", &[("len", 3), ("alphabet", 8)], 3003));
    tasks.push(other("far-parity-4", "parity", &[("len", 4)], 3004));
    for (i, &w) in PLANTED_WORLDS.iter().cycle().take(10).enumerate() {
        tasks.push(
            projection(format!("junk-{i}"), vocab, w, 20 + i as i64, 4000 + i as u64).with_param("noise", 1000),
        );
    }
    PoolSpec::Synthetic {
        tasks,
        ranks: vec![8, 4, 16],
        coverages: vec![Coverage::Full, Coverage::Full, Coverage::Attention],
        train: desk_lora_training(),
        seed: 17,
    }
}
