//! Parameter-space combination of task vectors.

mod ties;
mod tsv;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::TaskVectorSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, NodeId, Tape};
use crate::toylab::{ModelConfig, ModulePath, ModuleType, ToyModel};

pub use ties::{ties_merge, trim_count};
pub use tsv::{tsv_merge, TSV_DEFAULT_RANK};

/// Negative-side slope of the leaky ReLU activation.
pub const LEAKY_SLOPE: f64 = 0.01;

/// How finely merging coefficients are shared across modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Model,
    Layer,
    Sublayer,
    Module,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Model,
        Granularity::Layer,
        Granularity::Sublayer,
        Granularity::Module,
    ];

    pub fn group_count(self, n_layers: usize) -> usize {
        match self {
            Granularity::Model => 1,
            Granularity::Layer => n_layers,
            Granularity::Sublayer => 2 * n_layers,
            Granularity::Module => n_layers * ModuleType::ALL.len(),
        }
    }

    pub fn group_of(self, path: ModulePath) -> usize {
        match self {
            Granularity::Model => 0,
            Granularity::Layer => path.layer,
            Granularity::Sublayer => 2 * path.layer + usize::from(!path.module.is_attention()),
            Granularity::Module => path.layer * ModuleType::ALL.len() + path.module.index(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softmax,
    LeakyRelu,
    Linear,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Softmax, Activation::LeakyRelu, Activation::Linear];

    /// Records the activation of a `k×groups` coefficient node.
    pub fn on_tape<T: Scalar>(self, tape: &mut Tape<T>, raw: NodeId) -> NodeId {
        match self {
            Activation::Softmax => tape.softmax_cols(raw),
            Activation::LeakyRelu => tape.leaky_relu(raw, T::lit(LEAKY_SLOPE)),
            Activation::Linear => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientInit {
    Zeros,
    OneOverK,
}

/// Raw merging coefficients, one row per adapter and one column per group.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable<T = f64> {
    pub raw: Matrix<T>,
    pub granularity: Granularity,
    pub activation: Activation,
    pub n_layers: usize,
}

impl<T: Scalar> CoefficientTable<T> {
    pub fn new(k: usize, n_layers: usize, granularity: Granularity, activation: Activation, init: CoefficientInit) -> Self {
        let groups = granularity.group_count(n_layers);
        let value = match init {
            CoefficientInit::Zeros => T::zero(),
            CoefficientInit::OneOverK => T::one() / T::lit(k as f64),
        };
        Self {
            raw: Matrix::filled(k, groups, value),
            granularity,
            activation,
            n_layers,
        }
    }

    pub fn from_raw(raw: Matrix<T>, n_layers: usize, granularity: Granularity, activation: Activation) -> Result<Self> {
        let groups = granularity.group_count(n_layers);
        if raw.cols() != groups {
            return Err(Error::Dimension {
                op: "coefficient table",
                left: raw.shape(),
                right: (raw.rows(), groups),
            });
        }
        if !raw.is_finite() {
            return Err(Error::Numeric("coefficient table has non-finite entries".into()));
        }
        Ok(Self {
            raw,
            granularity,
            activation,
            n_layers,
        })
    }

    pub fn k(&self) -> usize {
        self.raw.rows()
    }

    pub fn groups(&self) -> usize {
        self.raw.cols()
    }
}

/// Activated coefficients: softmax down each group column, leaky ReLU
/// elementwise, or the raw values unchanged.
pub fn apply_activation<T: Scalar>(table: &CoefficientTable<T>) -> Matrix<T> {
    let raw = &table.raw;
    match table.activation {
        Activation::Linear => raw.clone(),
        Activation::LeakyRelu => {
            let slope = T::lit(LEAKY_SLOPE);
            raw.map(|x| if x >= T::zero() { x } else { slope * x })
        }
        Activation::Softmax => {
            let mut out = raw.clone();
            for j in 0..raw.cols() {
                let col = raw.column(j);
                let max = col.iter().copied().fold(T::neg_infinity(), T::max);
                let exps: Vec<T> = col.iter().map(|x| (*x - max).exp()).collect();
                let total: T = exps.iter().copied().sum();
                for (i, e) in exps.into_iter().enumerate() {
                    out.set(i, j, e / total);
                }
            }
            out
        }
    }
}

fn module_shapes<T: Scalar>(sets: &[&TaskVectorSet<T>]) -> Result<BTreeMap<ModulePath, (usize, usize)>> {
    let mut shapes = BTreeMap::new();
    for tvs in sets {
        for (p, d) in &tvs.deltas {
            let prev = *shapes.entry(*p).or_insert(d.shape());
            if prev != d.shape() {
                return Err(Error::Dimension {
                    op: "merge module shape",
                    left: prev,
                    right: d.shape(),
                });
            }
        }
    }
    Ok(shapes)
}

/// `Σ_i act[i, group(p)] · Δ_i[p]` for every module present in any set.
pub fn combine<T: Scalar>(sets: &[&TaskVectorSet<T>], table: &CoefficientTable<T>) -> Result<TaskVectorSet<T>> {
    if sets.len() != table.k() {
        return Err(Error::arg(format!(
            "{} task vector sets for a table of {} rows",
            sets.len(),
            table.k()
        )));
    }
    let act = apply_activation(table);
    let mut out = TaskVectorSet::new("merged");
    for (path, (n, m)) in module_shapes(sets)? {
        let g = table.granularity.group_of(path);
        if g >= table.groups() {
            return Err(Error::arg(format!("module {path} outside the table's {} layers", table.n_layers)));
        }
        let mut acc = Matrix::zeros(n, m);
        for (i, tvs) in sets.iter().enumerate() {
            if let Some(d) = tvs.deltas.get(&path) {
                acc.axpy(act.get(i, g), d)?;
            }
        }
        out.deltas.insert(path, acc);
    }
    Ok(out)
}

/// `Σ_i α_i Δ_i`; `alphas = None` means `1/k` each.
pub fn simple_average<T: Scalar>(sets: &[&TaskVectorSet<T>], alphas: Option<&[T]>) -> Result<TaskVectorSet<T>> {
    if sets.is_empty() {
        return Err(Error::arg("simple average of an empty pool"));
    }
    let k = sets.len();
    let uniform = vec![T::one() / T::lit(k as f64); k];
    let alphas = alphas.unwrap_or(&uniform);
    if alphas.len() != k {
        return Err(Error::arg(format!("{} coefficients for {k} task vector sets", alphas.len())));
    }
    let n_layers = sets
        .iter()
        .flat_map(|t| t.deltas.keys())
        .map(|p| p.layer + 1)
        .max()
        .unwrap_or(1);
    let raw = Matrix::from_vec(k, 1, alphas.to_vec())?;
    let table = CoefficientTable::from_raw(raw, n_layers, Granularity::Model, Activation::Linear)?;
    let mut out = combine(sets, &table)?;
    out.name = "simple-average".into();
    Ok(out)
}

/// The base model with `merged` added into its projection weights.
pub fn merge_into_model(model: &ToyModel, merged: &TaskVectorSet) -> Result<ToyModel> {
    model.fold(merged)
}

/// Every module of `cfg` gets an entry; absent ones become zeros.
pub fn densify(tvs: &TaskVectorSet, cfg: &ModelConfig) -> TaskVectorSet {
    let mut out = TaskVectorSet::zeros(tvs.name.clone(), cfg);
    for (p, d) in &tvs.deltas {
        out.deltas.insert(*p, d.clone());
    }
    out
}

/// Non-adaptive merge recipe as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MergeRecipe {
    SimpleAverage,
    Ties {
        prune_frac: f64,
        /// `None` means `1/k`.
        #[serde(default)]
        coeff: Option<f64>,
    },
    Tsv {
        #[serde(default = "default_tsv_rank")]
        q: usize,
        /// `None` means `1/30` for every adapter.
        #[serde(default)]
        weight: Option<f64>,
    },
}

fn default_tsv_rank() -> usize {
    TSV_DEFAULT_RANK
}

impl MergeRecipe {
    pub fn label(&self) -> String {
        match self {
            MergeRecipe::SimpleAverage => "simple_average".into(),
            MergeRecipe::Ties { prune_frac, coeff } => match coeff {
                Some(c) => format!("ties(p={prune_frac},c={c})"),
                None => format!("ties(p={prune_frac},c=1/k)"),
            },
            MergeRecipe::Tsv { q, weight } => match weight {
                Some(w) => format!("tsv(q={q},w={w})"),
                None => format!("tsv(q={q},w=1/30)"),
            },
        }
    }

    pub fn apply(&self, sets: &[&TaskVectorSet]) -> Result<TaskVectorSet> {
        let k = sets.len();
        if k == 0 {
            return Err(Error::arg("merge of an empty pool"));
        }
        match self {
            MergeRecipe::SimpleAverage => simple_average(sets, None),
            MergeRecipe::Ties { prune_frac, coeff } => ties_merge(sets, *prune_frac, coeff.unwrap_or(1.0 / k as f64)),
            MergeRecipe::Tsv { q, weight } => {
                let w = vec![weight.unwrap_or(1.0 / 30.0); k];
                tsv_merge(sets, *q, &w)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    fn set(name: &str, entries: &[(ModulePath, Mat)]) -> TaskVectorSet {
        TaskVectorSet {
            name: name.into(),
            deltas: entries.iter().cloned().collect(),
        }
    }

    fn q0() -> ModulePath {
        ModulePath::new(0, ModuleType::QProj)
    }

    fn d1() -> ModulePath {
        ModulePath::new(1, ModuleType::DownProj)
    }

    #[test]
    fn group_indices() {
        let p = ModulePath::new(2, ModuleType::UpProj);
        assert_eq!(Granularity::Model.group_of(p), 0);
        assert_eq!(Granularity::Layer.group_of(p), 2);
        assert_eq!(Granularity::Sublayer.group_of(p), 5);
        assert_eq!(Granularity::Module.group_of(p), 2 * 7 + 5);
        assert_eq!(Granularity::Sublayer.group_of(ModulePath::new(2, ModuleType::OProj)), 4);
        assert_eq!(Granularity::Module.group_count(4), 28);
        assert_eq!(Granularity::Sublayer.group_count(4), 8);
    }

    #[test]
    fn activations() {
        let mut t = CoefficientTable::<f64>::new(4, 1, Granularity::Model, Activation::Softmax, CoefficientInit::Zeros);
        assert!(apply_activation(&t).as_slice().iter().all(|&x| x == 0.25));
        t.activation = Activation::LeakyRelu;
        t.raw = Mat::from_vec(2, 1, vec![-1.0, 0.5]).unwrap();
        assert_eq!(apply_activation(&t).as_slice(), &[-0.01, 0.5]);
        t.activation = Activation::Linear;
        t.raw = Mat::from_vec(2, 1, vec![-1.7, 3.25]).unwrap();
        assert_eq!(apply_activation(&t), t.raw);
    }

    #[test]
    fn combine_identities() {
        let a = set("a", &[(q0(), Mat::filled(2, 2, 1.5))]);
        let table = CoefficientTable::from_raw(
            Mat::from_vec(2, 1, vec![0.5, 0.5]).unwrap(),
            1,
            Granularity::Model,
            Activation::Linear,
        )
        .unwrap();
        assert_eq!(combine(&[&a, &a], &table).unwrap().deltas, a.deltas);
        let zero = CoefficientTable::new(2, 1, Granularity::Model, Activation::Linear, CoefficientInit::Zeros);
        let z = combine(&[&a, &a], &zero).unwrap();
        assert!(z.deltas.values().all(|d| d.max_abs() == 0.0));
    }

    #[test]
    fn module_granular_selector() {
        let a = set("a", &[(q0(), Mat::filled(2, 2, 1.0)), (d1(), Mat::filled(2, 3, 2.0))]);
        let b = set("b", &[(q0(), Mat::filled(2, 2, -4.0)), (d1(), Mat::filled(2, 3, 5.0))]);
        let mut t = CoefficientTable::new(2, 2, Granularity::Module, Activation::Linear, CoefficientInit::Zeros);
        t.raw.set(0, Granularity::Module.group_of(q0()), 1.0);
        let out = combine(&[&a, &b], &t).unwrap();
        assert_eq!(out.deltas[&q0()], a.deltas[&q0()]);
        assert_eq!(out.deltas[&d1()].max_abs(), 0.0);
    }

    #[test]
    fn simple_average_cases() {
        let a = set("a", &[(q0(), Mat::filled(1, 1, 2.0))]);
        let b = set("b", &[(q0(), Mat::filled(1, 1, 4.0))]);
        assert_eq!(simple_average(&[&a, &b], None).unwrap().deltas[&q0()].get(0, 0), 3.0);
        assert_eq!(simple_average(&[&a, &b], Some(&[0.0, 1.0])).unwrap().deltas, b.deltas);
        assert!(matches!(simple_average(&[&a, &b], Some(&[1.0])), Err(Error::Argument(_))));
    }

    #[test]
    fn missing_modules_contribute_zero() {
        let a = set("a", &[(q0(), Mat::filled(1, 1, 2.0))]);
        let b = set("b", &[(d1(), Mat::filled(1, 1, 4.0))]);
        let out = simple_average(&[&a, &b], None).unwrap();
        assert_eq!(out.deltas[&q0()].get(0, 0), 1.0);
        assert_eq!(out.deltas[&d1()].get(0, 0), 2.0);
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let a = set("a", &[(q0(), Mat::filled(1, 1, 2.0))]);
        let b = set("b", &[(q0(), Mat::filled(1, 2, 4.0))]);
        assert!(matches!(simple_average(&[&a, &b], None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn recipe_serde() {
        let r: MergeRecipe = serde_json::from_str(r#"{"method":"ties","prune_frac":0.3}"#).unwrap();
        assert_eq!(r, MergeRecipe::Ties { prune_frac: 0.3, coeff: None });
        let r: MergeRecipe = serde_json::from_str(r#"{"method":"tsv"}"#).unwrap();
        assert_eq!(r, MergeRecipe::Tsv { q: 8, weight: None });
    }
}
