//! Low-rank adapters, their dense task vectors, and the on-disk container.

mod safetensors;
mod transform;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toylab::{ModelConfig, ModulePath};
use crate::Mat;

pub use safetensors::{
    load_adapter, load_raw, load_task_vectors, read_container, save_adapter, save_task_vectors, write_container, AdapterSidecar, Container,
    RawAdapter, TensorRecord, delta_tensor_name, task_vectors_container,
};
pub use transform::{
    flatten_features, materialize_task_vectors, pad_to_rank, reinit_matched, FeatureTransform, ModuleUniverse,
};
pub use validate::{validate_adapter, validate_raw, RejectReason, ValidationReport, Verdict, DEFAULT_MAGNITUDE_CAP};

/// Scaling rule attached to an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `s = α / r`
    #[default]
    Standard,
    /// `s = α / √r`
    RankStabilized,
}

impl Variant {
    pub fn scaling(self, alpha: f64, rank: usize) -> f64 {
        match self {
            Variant::Standard => alpha / rank as f64,
            Variant::RankStabilized => alpha / (rank as f64).sqrt(),
        }
    }
}

/// Element type used when the adapter is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StorageDtype {
    F16,
    BF16,
    #[default]
    F32,
    F64,
}

impl StorageDtype {
    pub fn tag(self) -> &'static str {
        match self {
            StorageDtype::F16 => "F16",
            StorageDtype::BF16 => "BF16",
            StorageDtype::F32 => "F32",
            StorageDtype::F64 => "F64",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "F16" => Ok(StorageDtype::F16),
            "BF16" => Ok(StorageDtype::BF16),
            "F32" => Ok(StorageDtype::F32),
            "F64" => Ok(StorageDtype::F64),
            other => Err(Error::Unsupported(format!("tensor dtype {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            StorageDtype::F16 | StorageDtype::BF16 => 2,
            StorageDtype::F32 => 4,
            StorageDtype::F64 => 8,
        }
    }

    /// Rounds `x` to the nearest value representable in this dtype.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            StorageDtype::F16 => half::f16::from_f64(x).to_f64(),
            StorageDtype::BF16 => half::bf16::from_f64(x).to_f64(),
            StorageDtype::F32 => x as f32 as f64,
            StorageDtype::F64 => x,
        }
    }
}

/// One adapted projection: `Δ = scaling · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `r×m`
    pub a: Mat,
    /// `n×r`
    pub b: Mat,
    pub scaling: f64,
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Result<Mat> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling))
    }
}

/// A named low-rank adapter over a subset of the base model's projections.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub modules: BTreeMap<ModulePath, LoraPair>,
    pub alpha: f64,
    pub rank: usize,
    pub variant: Variant,
    pub dtype: StorageDtype,
    pub metadata: BTreeMap<String, String>,
}

impl LoraAdapter {
    /// Builds an adapter whose pairs all use the scaling implied by
    /// `(alpha, rank, variant)`.
    pub fn new(
        name: impl Into<String>,
        alpha: f64,
        rank: usize,
        variant: Variant,
        pairs: impl IntoIterator<Item = (ModulePath, Mat, Mat)>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::arg("adapter rank must be at least 1"));
        }
        let scaling = variant.scaling(alpha, rank);
        let mut modules = BTreeMap::new();
        for (path, a, b) in pairs {
            if a.rows() != b.cols() {
                return Err(Error::Dimension {
                    op: "lora pair",
                    left: b.shape(),
                    right: a.shape(),
                });
            }
            modules.insert(path, LoraPair { a, b, scaling });
        }
        Ok(Self {
            name: name.into(),
            modules,
            alpha,
            rank,
            variant,
            dtype: StorageDtype::F32,
            metadata: BTreeMap::new(),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.variant.scaling(self.alpha, self.rank)
    }

    /// Structural check against a base model: every pair has the declared
    /// rank and the module's `(n, m)`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for (path, pair) in &self.modules {
            if !cfg.contains(*path) {
                return Err(Error::Validation(format!("module {path} is outside the base model")));
            }
            let (n, m) = cfg.module_shape(path.module);
            if pair.a.shape() != (pair.rank(), m) || pair.b.shape() != (n, pair.rank()) {
                return Err(Error::Dimension {
                    op: "adapter module shape",
                    left: pair.b.shape(),
                    right: pair.a.shape(),
                });
            }
        }
        Ok(())
    }

    /// Every stored value rounded to the storage dtype, so in-memory and
    /// on-disk copies agree exactly.
    pub fn quantized(mut self) -> Self {
        let dt = self.dtype;
        for pair in self.modules.values_mut() {
            pair.a = pair.a.map(|x| dt.quantize(x));
            pair.b = pair.b.map(|x| dt.quantize(x));
        }
        self
    }

    /// Sum of all stored parameters, used as a cheap change detector.
    pub fn checksum(&self) -> f64 {
        self.modules
            .values()
            .map(|p| p.a.sum() + p.b.sum())
            .sum()
    }
}

/// Dense per-module deltas of one adapter (or of a merge).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorSet<T = f64> {
    pub name: String,
    pub deltas: BTreeMap<ModulePath, Matrix<T>>,
}

impl<T: Scalar> TaskVectorSet<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            deltas: BTreeMap::new(),
        }
    }

    /// All-zero deltas over every module of `cfg`.
    pub fn zeros(name: impl Into<String>, cfg: &ModelConfig) -> Self {
        let deltas = cfg
            .module_paths()
            .into_iter()
            .map(|p| {
                let (n, m) = cfg.module_shape(p.module);
                (p, Matrix::zeros(n, m))
            })
            .collect();
        Self {
            name: name.into(),
            deltas,
        }
    }

    pub fn get(&self, path: &ModulePath) -> Option<&Matrix<T>> {
        self.deltas.get(path)
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            name: self.name.clone(),
            deltas: self.deltas.iter().map(|(p, d)| (*p, d.scale(c))).collect(),
        }
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        for (path, d) in &self.deltas {
            let want = cfg.module_shape(path.module);
            if !cfg.contains(*path) || d.shape() != want {
                return Err(Error::Dimension {
                    op: "task vector shape",
                    left: d.shape(),
                    right: want,
                });
            }
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> T {
        self.deltas
            .values()
            .map(|d| {
                let n = d.frobenius_norm();
                n * n
            })
            .sum::<T>()
            .sqrt()
    }

    /// Largest per-module Frobenius distance to `other`; modules missing on
    /// one side count as zero.
    pub fn max_module_distance(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for path in self.deltas.keys().chain(other.deltas.keys()) {
            let d = match (self.deltas.get(path), other.deltas.get(path)) {
                (Some(a), Some(b)) => a.sub(b).map(|m| m.frobenius_norm()).unwrap_or(T::infinity()),
                (Some(a), None) | (None, Some(a)) => a.frobenius_norm(),
                (None, None) => T::zero(),
            };
            worst = worst.max(d);
        }
        worst
    }
}
