use crate::error::{Error, Result};
use crate::merge::{apply_activation, CoefficientTable};

/// Share of the merge held by each adapter. Every group's activated
/// coefficients are min-max scaled to `[0, 1]` (an all-equal group gives
/// every adapter `1/k`) and divided by their sum; shares are then averaged
/// over groups.
pub fn coefficient_distribution(table: &CoefficientTable) -> Result<Vec<f64>> {
    let k = table.k();
    if k < 2 {
        return Err(Error::arg("coefficient distribution needs at least two adapters"));
    }
    let act = apply_activation(table);
    let groups = act.cols();
    let mut shares = vec![0.0; k];
    for g in 0..groups {
        let col: Vec<f64> = (0..k).map(|i| act.get(i, g)).collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let scaled: Vec<f64> = col.iter().map(|&v| (v - lo) / (hi - lo)).collect();
            let total: f64 = scaled.iter().sum();
            for (s, v) in shares.iter_mut().zip(scaled) {
                *s += v / total;
            }
        } else {
            for s in shares.iter_mut() {
                *s += 1.0 / k as f64;
            }
        }
    }
    for s in shares.iter_mut() {
        *s /= groups as f64;
    }
    Ok(shares)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{Activation, Granularity};
    use crate::Mat;
    use proptest::prelude::*;

    fn table(rows: Vec<Vec<f64>>, gran: Granularity, act: Activation, layers: usize) -> CoefficientTable {
        CoefficientTable::from_raw(Mat::from_rows(&rows).unwrap(), layers, gran, act).unwrap()
    }

    #[test]
    fn equal_coefficients_share_evenly() {
        let t = table(vec![vec![0.3; 2]; 4], Granularity::Layer, Activation::Linear, 2);
        assert_eq!(coefficient_distribution(&t).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn two_adapters_one_group() {
        let t = table(vec![vec![2.0], vec![1.0]], Granularity::Model, Activation::Linear, 1);
        assert_eq!(coefficient_distribution(&t).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn single_adapter_is_rejected() {
        let t = table(vec![vec![1.0]], Granularity::Model, Activation::Linear, 1);
        assert!(coefficient_distribution(&t).is_err());
    }

    proptest! {
        #[test]
        fn shares_are_a_distribution(k in 2usize..6, vals in prop::collection::vec(-3.0f64..3.0, 5 * 2 * 7 * 2)) {
            let raw = Mat::from_fn(k, 14, |i, j| vals[i * 14 + j]);
            for act in Activation::ALL {
                let t = CoefficientTable::from_raw(raw.clone(), 2, Granularity::Module, act).unwrap();
                let d = coefficient_distribution(&t).unwrap();
                prop_assert!(d.iter().all(|&x| x >= 0.0));
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
