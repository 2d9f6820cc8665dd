use serde::{Deserialize, Serialize};

use crate::adapter::{materialize_task_vectors, reinit_matched, LoraAdapter, TaskVectorSet};
use crate::error::{Error, Result};
use crate::selection::select_by_evaluation;
use crate::toylab::{TaskDataset, ToyModel};
use crate::tuner::{tune_gradient_based, TuneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub task: String,
    pub k: usize,
    pub omit_m: usize,
    /// The window's adapters were replaced by matched random ones.
    pub reinit: bool,
    pub accuracy: f64,
    /// Merged adapters; the target-task adapter is last.
    pub constituents: Vec<String>,
}

/// An in-house pool ranked for one target task.
#[derive(Debug)]
pub struct InhouseWindow<'a> {
    model: &'a ToyModel,
    data: &'a TaskDataset,
    target: &'a LoraAdapter,
    target_vectors: TaskVectorSet,
    /// Other adapters, best first.
    ranked: Vec<(&'a LoraAdapter, TaskVectorSet)>,
}

impl<'a> InhouseWindow<'a> {
    /// Ranks `pool` (minus any adapter named like the target) by accuracy
    /// on the target task's labelled examples.
    pub fn new(model: &'a ToyModel, data: &'a TaskDataset, target: &'a LoraAdapter, pool: &'a [LoraAdapter]) -> Result<Self> {
        let others: Vec<&LoraAdapter> = pool.iter().filter(|a| a.name != target.name).collect();
        if others.is_empty() {
            return Err(Error::arg("in-house pool has no other adapters"));
        }
        let vectors = others.iter().map(|a| materialize_task_vectors(a)).collect::<Result<Vec<_>>>()?;
        let ranking = select_by_evaluation(&vectors, model, &data.labelled(), vectors.len())?;
        let mut slots: Vec<Option<(&LoraAdapter, TaskVectorSet)>> = others.into_iter().zip(vectors).map(Some).collect();
        let ranked = ranking
            .names
            .iter()
            .map(|n| {
                let i = slots
                    .iter()
                    .position(|s| s.as_ref().is_some_and(|(a, _)| &a.name == n))
                    .expect("ranked name is in the pool");
                slots[i].take().expect("each name ranked once")
            })
            .collect();
        Ok(Self {
            model,
            data,
            target,
            target_vectors: materialize_task_vectors(target)?,
            ranked,
        })
    }

    pub fn pool_size(&self) -> usize {
        self.ranked.len()
    }

    pub fn ranked_names(&self) -> Vec<&str> {
        self.ranked.iter().map(|(a, _)| a.name.as_str()).collect()
    }

    fn window(&self, k: usize, omit_m: usize) -> Result<&[(&'a LoraAdapter, TaskVectorSet)]> {
        if k == 0 {
            return Err(Error::arg("window size must be at least 1"));
        }
        let end = omit_m + k - 1;
        if end > self.ranked.len() {
            return Err(Error::arg(format!(
                "in-house pool of {} cannot skip {omit_m} and take {}",
                self.ranked.len(),
                k - 1
            )));
        }
        Ok(&self.ranked[omit_m..end])
    }

    fn tune_and_score(&self, sets: Vec<&TaskVectorSet>, tune: &TuneConfig) -> Result<f64> {
        let result = tune_gradient_based(self.model, &sets, tune, self.data)?;
        let merged = result.merged(0, &sets)?;
        self.model.evaluate_accuracy(Some(&merged), &self.data.test)
    }

    /// Skips the `omit_m` best adapters, merges the next `k − 1` with the
    /// target-task adapter and reports test accuracy.
    pub fn run(&self, k: usize, omit_m: usize, tune: &TuneConfig) -> Result<WindowRow> {
        let window = self.window(k, omit_m)?;
        let mut sets: Vec<&TaskVectorSet> = window.iter().map(|(_, v)| v).collect();
        sets.push(&self.target_vectors);
        let mut constituents: Vec<String> = window.iter().map(|(a, _)| a.name.clone()).collect();
        constituents.push(self.target.name.clone());
        Ok(WindowRow {
            task: self.data.name.clone(),
            k,
            omit_m,
            reinit: false,
            accuracy: self.tune_and_score(sets, tune)?,
            constituents,
        })
    }

    /// The unshifted window with every non-target adapter reinitialized.
    pub fn run_reinit(&self, k: usize, tune: &TuneConfig, seed: u64) -> Result<WindowRow> {
        let window = self.window(k, 0)?;
        let fresh = window
            .iter()
            .enumerate()
            .map(|(i, (a, _))| materialize_task_vectors(&reinit_matched(a, seed.wrapping_add(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        let mut sets: Vec<&TaskVectorSet> = fresh.iter().collect();
        sets.push(&self.target_vectors);
        let mut constituents: Vec<String> = window.iter().map(|(a, _)| format!("reinit-{}", a.name)).collect();
        constituents.push(self.target.name.clone());
        Ok(WindowRow {
            task: self.data.name.clone(),
            k,
            omit_m: 0,
            reinit: true,
            accuracy: self.tune_and_score(sets, tune)?,
            constituents,
        })
    }
}

/// One sliding-window run over an in-house pool.
pub fn inhouse_window_experiment(
    model: &ToyModel,
    data: &TaskDataset,
    target: &LoraAdapter,
    inhouse_pool: &[LoraAdapter],
    k: usize,
    omit_m: usize,
    tune: &TuneConfig,
) -> Result<WindowRow> {
    InhouseWindow::new(model, data, target, inhouse_pool)?.run(k, omit_m, tune)
}
