use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LoraAdapter, TaskVectorSet, Variant};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::toylab::{ModelConfig, ModulePath};
use crate::Mat;

/// Dense `scaling · B · A` per adapted module.
pub fn materialize_task_vectors(adapter: &LoraAdapter) -> Result<TaskVectorSet> {
    let mut tvs = TaskVectorSet::new(adapter.name.clone());
    for (path, pair) in &adapter.modules {
        tvs.deltas.insert(*path, pair.delta()?);
    }
    Ok(tvs)
}

/// Zero-pads every pair to rank `r_max`. Pair scalings are kept as they
/// are; `alpha` is rewritten so the declared rule still yields them.
pub fn pad_to_rank(adapter: &LoraAdapter, r_max: usize) -> Result<LoraAdapter> {
    let current = adapter.modules.values().map(|p| p.rank()).max().unwrap_or(0).max(adapter.rank);
    if r_max < current {
        return Err(Error::arg(format!(
            "cannot pad adapter {} of rank {current} down to {r_max}",
            adapter.name
        )));
    }
    if r_max == adapter.rank && adapter.modules.values().all(|p| p.rank() == r_max) {
        return Ok(adapter.clone());
    }
    let mut out = adapter.clone();
    for pair in out.modules.values_mut() {
        pair.a = pair.a.pad_zeros(r_max, pair.a.cols())?;
        pair.b = pair.b.pad_zeros(pair.b.rows(), r_max)?;
    }
    let s = adapter.scaling();
    out.alpha = match adapter.variant {
        Variant::Standard => s * r_max as f64,
        Variant::RankStabilized => s * (r_max as f64).sqrt(),
    };
    out.rank = r_max;
    Ok(out)
}

/// Replaces every A and B with zero-mean Gaussian noise whose standard
/// deviation matches the population std of the matrix it replaces.
pub fn reinit_matched(adapter: &LoraAdapter, seed: u64) -> LoraAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = adapter.clone();
    let draw = |m: &Mat, rng: &mut ChaCha8Rng| {
        let std = m.population_std();
        let sample = Mat::randn(m.rows(), m.cols(), std, rng);
        if std == 0.0 {
            Mat::zeros(m.rows(), m.cols())
        } else {
            sample
        }
    };
    for pair in out.modules.values_mut() {
        pair.a = draw(&pair.a, &mut rng);
        pair.b = draw(&pair.b, &mut rng);
    }
    out.quantized()
}

/// Elementwise map applied before similarity scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTransform {
    Identity,
    Absolute,
    Square,
    ClampNonneg,
}

impl FeatureTransform {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            FeatureTransform::Identity => x,
            FeatureTransform::Absolute => x.abs(),
            FeatureTransform::Square => x * x,
            FeatureTransform::ClampNonneg => x.max(T::zero()),
        }
    }
}

/// Ordered list of modules (with their shapes) that defines a feature
/// space shared by a comparison group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleUniverse {
    pub entries: Vec<(ModulePath, (usize, usize))>,
}

impl ModuleUniverse {
    pub fn full(cfg: &ModelConfig) -> Self {
        Self {
            entries: cfg
                .module_paths()
                .into_iter()
                .map(|p| (p, cfg.module_shape(p.module)))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, (n, m))| n * m).sum()
    }
}

/// Concatenates the transformed deltas over `universe`; modules missing
/// from `tvs` contribute zeros.
pub fn flatten_features<T: Scalar>(
    tvs: &TaskVectorSet<T>,
    transform: FeatureTransform,
    universe: &ModuleUniverse,
) -> Vec<T> {
    let mut out = Vec::with_capacity(universe.dim());
    for (path, (n, m)) in &universe.entries {
        match tvs.deltas.get(path) {
            Some(d) => out.extend(d.as_slice().iter().map(|&x| transform.apply(x))),
            None => out.extend(std::iter::repeat_n(T::zero(), n * m)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::ModuleType;

    fn pair_adapter(variant: Variant, alpha: f64, rank: usize) -> LoraAdapter {
        let p = ModulePath::new(0, ModuleType::QProj);
        let a = Mat::from_fn(rank, 2, |i, j| (i + 2 * j) as f64 - 1.5);
        let b = Mat::from_fn(3, rank, |i, j| 0.25 * (i as f64) - j as f64);
        LoraAdapter::new("p", alpha, rank, variant, [(p, a, b)]).unwrap()
    }

    #[test]
    fn hand_multiplied_delta() {
        let p = ModulePath::new(0, ModuleType::QProj);
        let a = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![2.0], vec![3.0]]).unwrap();
        let ad = LoraAdapter::new("h", 1.0, 1, Variant::Standard, [(p, a, b)]).unwrap();
        let tvs = materialize_task_vectors(&ad).unwrap();
        assert_eq!(tvs.deltas[&p].as_slice(), &[2.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn rank_stabilized_doubles() {
        let std = materialize_task_vectors(&pair_adapter(Variant::Standard, 4.0, 4)).unwrap();
        let rs = materialize_task_vectors(&pair_adapter(Variant::RankStabilized, 4.0, 4)).unwrap();
        for (p, d) in &std.deltas {
            assert_eq!(rs.deltas[p], d.scale(2.0));
        }
    }

    #[test]
    fn padding_keeps_deltas_exact() {
        for variant in [Variant::Standard, Variant::RankStabilized] {
            let a = pair_adapter(variant, 3.0, 2);
            let padded = pad_to_rank(&a, 5).unwrap();
            assert_eq!(padded.rank, 5);
            assert!((padded.scaling() - a.scaling()).abs() < 1e-15);
            assert_eq!(
                materialize_task_vectors(&padded).unwrap(),
                materialize_task_vectors(&a).unwrap()
            );
            assert_eq!(pad_to_rank(&a, 2).unwrap(), a);
            assert!(matches!(pad_to_rank(&a, 1), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn reinit_matches_std_and_is_deterministic() {
        let p = ModulePath::new(0, ModuleType::QProj);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Mat::randn(128, 128, 0.02, &mut rng);
        let ad = LoraAdapter::new("r", 1.0, 128, Variant::Standard, [(p, a, Mat::zeros(128, 128))]).unwrap();
        let r1 = reinit_matched(&ad, 4);
        let r2 = reinit_matched(&ad, 4);
        assert_eq!(r1, r2);
        let pair = &r1.modules[&p];
        assert!((pair.a.population_std() / 0.02 - 1.0).abs() < 0.1);
        assert_eq!(pair.b, Mat::zeros(128, 128));
        assert_ne!(reinit_matched(&ad, 5), r1);
    }

    #[test]
    fn features_fill_absent_modules() {
        let cfg = ModelConfig {
            vocab: 8,
            d_model: 2,
            n_layers: 1,
            n_heads: 1,
            d_ff: 2,
            max_seq: 4,
        };
        let universe = ModuleUniverse::full(&cfg);
        let mut tvs = TaskVectorSet::<f64>::new("f");
        tvs.deltas.insert(
            ModulePath::new(0, ModuleType::KProj),
            Mat::from_rows(&[vec![1.0, -1.0], vec![-2.0, 0.5]]).unwrap(),
        );
        let f = flatten_features(&tvs, FeatureTransform::ClampNonneg, &universe);
        assert_eq!(f.len(), universe.dim());
        assert_eq!(&f[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5]);
        let sq = flatten_features(&tvs, FeatureTransform::Square, &universe);
        let neg = flatten_features(&tvs.scale(-1.0), FeatureTransform::Square, &universe);
        assert_eq!(sq, neg);
    }
}
