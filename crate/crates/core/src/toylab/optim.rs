use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

/// Update rule shared by adapter training and coefficient tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with the global gradient norm clipped to `clip`
    /// (no clipping when `clip` ≤ 0).
    Sgd { clip: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_clipped() -> Self {
        OptimizerKind::Sgd { clip: 1.0 }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimizer state for a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Mat>,
    second: Vec<Mat>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Mat]) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
            OptimizerKind::Sgd { .. } => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            kind,
            lr,
            first,
            second,
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::arg("parameter and gradient counts differ"));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { clip } => {
                let norm = grads.iter().map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-self.lr * factor, g)?;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if p.shape() != g.shape() {
                        return Err(Error::Dimension {
                            op: "optimizer step",
                            left: p.shape(),
                            right: g.shape(),
                        });
                    }
                    let m = self.first[i].as_mut_slice();
                    let v = self.second[i].as_mut_slice();
                    for (((x, &gr), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gr;
                        *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                        *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimize(kind: OptimizerKind, lr: f64) -> f64 {
        let mut p = vec![Mat::filled(1, 2, 3.0)];
        let mut opt = Optimizer::new(kind, lr, &p).unwrap();
        for _ in 0..500 {
            let g = vec![p[0].scale(2.0)];
            opt.step(&mut p, &g).unwrap();
        }
        p[0].max_abs()
    }

    #[test]
    fn both_rules_descend_a_quadratic() {
        assert!(minimize(OptimizerKind::adam(), 0.05) < 1e-2);
        assert!(minimize(OptimizerKind::Sgd { clip: 0.0 }, 0.1) < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut p = vec![Mat::zeros(1, 1)];
        let mut opt = Optimizer::new(OptimizerKind::sgd_clipped(), 1.0, &p).unwrap();
        opt.step(&mut p, &[Mat::filled(1, 1, 100.0)]).unwrap();
        assert_eq!(p[0].get(0, 0), -1.0);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Optimizer::new(OptimizerKind::adam(), 0.0, &[]).is_err());
    }
}
