use super::module_shapes;
use crate::adapter::TaskVectorSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{truncated_svd, Matrix};

/// Singular directions kept per adapter unless configured otherwise.
pub const TSV_DEFAULT_RANK: usize = 8;

/// `Σ_i w_i · truncate_q(Δ_i)` per module, where `truncate_q` is the rank-`q`
/// SVD reconstruction.
pub fn tsv_merge<T: Scalar>(sets: &[&TaskVectorSet<T>], q: usize, weights: &[T]) -> Result<TaskVectorSet<T>> {
    if sets.is_empty() {
        return Err(Error::arg("TSV merge of an empty pool"));
    }
    if weights.len() != sets.len() {
        return Err(Error::arg(format!("{} weights for {} task vector sets", weights.len(), sets.len())));
    }
    let shapes = module_shapes(sets)?;
    if let Some((path, (n, m))) = shapes.iter().find(|(_, (n, m))| q == 0 || q > (*n).min(*m)) {
        return Err(Error::arg(format!("rank {q} out of range for module {path} of shape {n}x{m}")));
    }
    let mut out = TaskVectorSet::new("tsv");
    for (path, (n, m)) in shapes {
        let mut acc = Matrix::zeros(n, m);
        for (tvs, &w) in sets.iter().zip(weights) {
            let Some(d) = tvs.deltas.get(&path) else { continue };
            if w == T::zero() {
                continue;
            }
            let approx = truncated_svd(d, q)?.reconstruct();
            acc.axpy(w, &approx)?;
        }
        out.deltas.insert(path, acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::{ModulePath, ModuleType};

    fn one(m: Matrix<f64>) -> TaskVectorSet {
        let mut t = TaskVectorSet::new("x");
        t.deltas.insert(ModulePath::new(0, ModuleType::QProj), m);
        t
    }

    #[test]
    fn diagonal_truncation() {
        let d = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = tsv_merge(&[&one(d)], 1, &[1.0]).unwrap();
        let got = out.deltas.values().next().unwrap();
        let want = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(got.sub(&want).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn low_rank_input_is_reproduced() {
        let b = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.5, -1.0, 2.0, 0.0]]).unwrap();
        let d = b.matmul(&a).unwrap();
        let out = tsv_merge(&[&one(d.clone())], 2, &[1.0]).unwrap();
        assert!(out.deltas.values().next().unwrap().sub(&d).unwrap().frobenius_norm() < 1e-8);
    }

    #[test]
    fn zero_weights_and_bad_rank() {
        let d = Matrix::filled(2, 2, 1.0);
        let out = tsv_merge(&[&one(d.clone())], 1, &[0.0]).unwrap();
        assert_eq!(out.deltas.values().next().unwrap().max_abs(), 0.0);
        assert!(matches!(tsv_merge(&[&one(d.clone())], 3, &[1.0]), Err(Error::Argument(_))));
        assert!(matches!(tsv_merge(&[&one(d)], 0, &[1.0]), Err(Error::Argument(_))));
    }
}
