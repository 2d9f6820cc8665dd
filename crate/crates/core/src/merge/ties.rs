use std::cmp::Ordering;

use super::module_shapes;
use crate::adapter::TaskVectorSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Entries kept per adapter: `⌈(1 − prune_frac)·len⌉`, with products that
/// land within rounding noise of an integer treated as that integer.
pub fn trim_count(prune_frac: f64, len: usize) -> usize {
    let x = (1.0 - prune_frac) * len as f64;
    let r = x.round();
    let keep = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (keep.max(0.0) as usize).min(len)
}

/// Zeroes all but the `keep` largest-magnitude entries; equal magnitudes
/// favour the lower flat index.
fn trim<T: Scalar>(values: &[T], keep: usize) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .partial_cmp(&values[i].abs())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut out = vec![T::zero(); values.len()];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// Trim, elect sign, disjoint mean, scale; run separately on every module.
/// Adapters without a module take part with an all-zero delta there.
pub fn ties_merge<T: Scalar>(sets: &[&TaskVectorSet<T>], prune_frac: f64, coeff: T) -> Result<TaskVectorSet<T>> {
    if sets.is_empty() {
        return Err(Error::arg("TIES merge of an empty pool"));
    }
    if !(0.0..1.0).contains(&prune_frac) {
        return Err(Error::arg(format!("prune fraction {prune_frac} outside [0, 1)")));
    }
    let mut out = TaskVectorSet::new("ties");
    for (path, (n, m)) in module_shapes(sets)? {
        let len = n * m;
        let keep = trim_count(prune_frac, len);
        let zeros = vec![T::zero(); len];
        let trimmed: Vec<Vec<T>> = sets
            .iter()
            .map(|t| match t.deltas.get(&path) {
                Some(d) => trim(d.as_slice(), keep),
                None => zeros.clone(),
            })
            .collect();
        let mut merged = vec![T::zero(); len];
        for (e, slot) in merged.iter_mut().enumerate() {
            let total: T = trimmed.iter().map(|v| v[e]).sum();
            let positive = total >= T::zero();
            let (mut acc, mut count) = (T::zero(), 0usize);
            for v in &trimmed {
                let x = v[e];
                if (positive && x > T::zero()) || (!positive && x < T::zero()) {
                    acc += x;
                    count += 1;
                }
            }
            if count > 0 {
                *slot = acc / T::lit(count as f64) * coeff;
            }
        }
        out.deltas.insert(path, Matrix::from_vec(n, m, merged)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::{ModulePath, ModuleType};

    fn one(name: &str, v: &[f64]) -> TaskVectorSet {
        let mut t = TaskVectorSet::new(name);
        t.deltas.insert(
            ModulePath::new(0, ModuleType::QProj),
            Matrix::from_vec(1, v.len(), v.to_vec()).unwrap(),
        );
        t
    }

    fn values(t: &TaskVectorSet) -> Vec<f64> {
        t.deltas.values().next().unwrap().as_slice().to_vec()
    }

    #[test]
    fn worked_example() {
        let a = one("a", &[1.0, -2.0]);
        let b = one("b", &[3.0, 0.5]);
        assert_eq!(values(&ties_merge(&[&a, &b], 0.5, 1.0).unwrap()), vec![3.0, -2.0]);
    }

    #[test]
    fn single_adapter_identity() {
        let a = one("a", &[1.0, -2.0, 0.0, 0.25]);
        assert_eq!(values(&ties_merge(&[&a], 0.0, 1.0).unwrap()), values(&a));
    }

    #[test]
    fn opposite_adapters_elect_positive() {
        let a = one("a", &[1.0, -2.0, 3.0]);
        let b = one("b", &[-1.0, 2.0, -3.0]);
        assert_eq!(values(&ties_merge(&[&a, &b], 0.0, 1.0).unwrap()), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn trim_ties_keep_lower_index() {
        assert_eq!(trim(&[1.0, -1.0, 1.0], 2), vec![1.0, -1.0, 0.0]);
        assert_eq!(trim_count(1.0 / 3.0, 3), 2);
        assert_eq!(trim_count(2.0 / 3.0, 3), 1);
        assert_eq!(trim_count(0.5, 3), 2);
        assert_eq!(trim_count(0.0, 9), 9);
    }

    #[test]
    fn rejects_bad_prune_fraction() {
        let a = one("a", &[1.0]);
        assert!(ties_merge(&[&a], 1.0, 1.0).is_err());
        assert!(ties_merge::<f64>(&[], 0.1, 1.0).is_err());
    }
}
