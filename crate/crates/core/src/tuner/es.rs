//! Elitist (1+λ) evolution strategy with the one-fifth success rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub const INITIAL_STEP_SIZE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolutionStrategy {
    pub dim: usize,
    pub offspring: usize,
    pub initial_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct EsState {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub sigma: f64,
    pub evaluations: usize,
    rng: ChaCha8Rng,
}

impl EvolutionStrategy {
    /// `4 + ⌊3 ln dim⌋` offspring per generation.
    pub fn new(dim: usize) -> Self {
        let offspring = 4 + (3.0 * (dim.max(1) as f64).ln()).floor() as usize;
        Self {
            dim,
            offspring,
            initial_sigma: INITIAL_STEP_SIZE,
        }
    }

    pub fn start(&self, x0: Vec<f64>, objective: &impl Fn(&[f64]) -> Result<f64>, seed: u64) -> Result<EsState> {
        let value = objective(&x0)?;
        Ok(EsState {
            best: x0,
            best_value: if value.is_nan() { f64::INFINITY } else { value },
            sigma: self.initial_sigma,
            evaluations: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Samples one generation around the parent and keeps the best point
    /// seen so far. Returns the best offspring value of this generation.
    pub fn generation(&self, state: &mut EsState, objective: &impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut gen_best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..self.offspring {
            let child: Vec<f64> = state
                .best
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut state.rng);
                    x + state.sigma * z
                })
                .collect();
            let mut value = objective(&child)?;
            state.evaluations += 1;
            if value.is_nan() {
                value = f64::INFINITY;
            }
            if gen_best.as_ref().is_none_or(|(v, _)| value < *v) {
                gen_best = Some((value, child));
            }
        }
        let (value, child) = gen_best.expect("at least one offspring");
        if value < state.best_value {
            state.best_value = value;
            state.best = child;
            state.sigma *= (1.0f64 / 3.0).exp();
        } else {
            state.sigma *= (-1.0f64 / 12.0).exp();
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offspring_count() {
        assert_eq!(EvolutionStrategy::new(1).offspring, 4);
        assert_eq!(EvolutionStrategy::new(10).offspring, 10);
        assert_eq!(EvolutionStrategy::new(20).offspring, 12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = [0.5, -1.0, 2.0];
        let f = |x: &[f64]| Ok(x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        let es = EvolutionStrategy::new(3);
        let mut state = es.start(vec![0.0; 3], &f, 7).unwrap();
        let mut last = state.best_value;
        for _ in 0..300 {
            es.generation(&mut state, &f).unwrap();
            assert!(state.best_value <= last);
            last = state.best_value;
        }
        assert!(state.best_value < 1e-6, "{}", state.best_value);
    }

    #[test]
    fn nan_offspring_are_never_kept() {
        let f = |x: &[f64]| Ok(if x[0] > 0.0 { f64::NAN } else { x[0].abs() + 1.0 });
        let es = EvolutionStrategy::new(1);
        let mut state = es.start(vec![-1.0], &f, 1).unwrap();
        for _ in 0..50 {
            es.generation(&mut state, &f).unwrap();
        }
        assert!(state.best_value.is_finite());
        assert!(state.best[0] <= 0.0);
    }
}
