//! Picking `k` adapters out of a pool.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{flatten_features, FeatureTransform, ModuleUniverse, TaskVectorSet};
use crate::error::{Error, Result};
use crate::toylab::{Example, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random,
    Evaluation,
    Cosine,
    Abs,
    Clamp,
    QuasiFim,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 6] = [
        SelectionStrategy::Random,
        SelectionStrategy::Evaluation,
        SelectionStrategy::Cosine,
        SelectionStrategy::Abs,
        SelectionStrategy::Clamp,
        SelectionStrategy::QuasiFim,
    ];

    /// Feature transform for the similarity strategies.
    pub fn transform(self) -> Option<FeatureTransform> {
        match self {
            SelectionStrategy::Cosine => Some(FeatureTransform::Identity),
            SelectionStrategy::Abs => Some(FeatureTransform::Absolute),
            SelectionStrategy::Clamp => Some(FeatureTransform::ClampNonneg),
            SelectionStrategy::QuasiFim => Some(FeatureTransform::Square),
            SelectionStrategy::Random | SelectionStrategy::Evaluation => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::Evaluation => "evaluation",
            SelectionStrategy::Cosine => "cosine",
            SelectionStrategy::Abs => "abs",
            SelectionStrategy::Clamp => "clamp",
            SelectionStrategy::QuasiFim => "quasi_fim",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionStrategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::arg(format!("unknown selection strategy `{s}`")))
    }
}

/// Strategy plus the inputs it needs.
#[derive(Debug, Clone, Copy)]
pub enum SelectionRequest<'a> {
    Random { seed: u64 },
    Evaluation { model: &'a ToyModel, train: &'a [Example] },
    Similarity { strategy: SelectionStrategy, reference: &'a TaskVectorSet },
}

impl SelectionRequest<'_> {
    pub fn strategy(&self) -> SelectionStrategy {
        match self {
            SelectionRequest::Random { .. } => SelectionStrategy::Random,
            SelectionRequest::Evaluation { .. } => SelectionStrategy::Evaluation,
            SelectionRequest::Similarity { strategy, .. } => *strategy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: SelectionStrategy,
    /// Best first.
    pub names: Vec<String>,
    pub scores: Vec<f64>,
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::arg(format!("cannot select {k} adapters from a pool of {n}")));
    }
    Ok(())
}

fn check_names(pool: &[TaskVectorSet]) -> Result<()> {
    let mut seen = BTreeMap::new();
    for tvs in pool {
        if seen.insert(tvs.name.as_str(), ()).is_some() {
            return Err(Error::arg(format!("duplicate adapter name `{}` in pool", tvs.name)));
        }
    }
    Ok(())
}

/// Sorts by score descending, names ascending, and keeps the first `k`.
fn top_k(strategy: SelectionStrategy, mut scored: Vec<(String, f64)>, k: usize) -> SelectionResult {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    let (names, scores) = scored.into_iter().unzip();
    SelectionResult {
        strategy,
        names,
        scores,
    }
}

/// Uniform sample without replacement. The pool is ordered by name before
/// sampling so its input order does not matter.
pub fn select_random<S: AsRef<str>>(pool: &[S], k: usize, seed: u64) -> Result<SelectionResult> {
    check_k(k, pool.len())?;
    let mut names: Vec<String> = pool.iter().map(|s| s.as_ref().to_string()).collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);
    names.truncate(k);
    Ok(SelectionResult {
        strategy: SelectionStrategy::Random,
        scores: vec![0.0; names.len()],
        names,
    })
}

/// Ranks by exact-match accuracy on `train` with each adapter applied alone.
pub fn select_by_evaluation(
    pool: &[TaskVectorSet],
    model: &ToyModel,
    train: &[Example],
    k: usize,
) -> Result<SelectionResult> {
    check_k(k, pool.len())?;
    check_names(pool)?;
    let scored = pool
        .iter()
        .map(|tvs| Ok((tvs.name.clone(), model.evaluate_accuracy(Some(tvs), train)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k(SelectionStrategy::Evaluation, scored, k))
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // sqrt(na·nb) is exact for identical vectors, so self-similarity is 1.
    let prod = na * nb;
    let denom = if prod.is_finite() && prod > 0.0 {
        prod.sqrt()
    } else {
        na.sqrt() * nb.sqrt()
    };
    dot / denom
}

/// Union of the modules present in `sets`, with their shapes, in path order.
pub fn union_universe<'a>(sets: impl IntoIterator<Item = &'a TaskVectorSet>) -> ModuleUniverse {
    let mut entries = BTreeMap::new();
    for tvs in sets {
        for (p, d) in &tvs.deltas {
            entries.entry(*p).or_insert(d.shape());
        }
    }
    ModuleUniverse {
        entries: entries.into_iter().collect(),
    }
}

/// Ranks by similarity of transformed, flattened deltas to `reference`.
pub fn select_by_similarity(
    pool: &[TaskVectorSet],
    reference: &TaskVectorSet,
    strategy: SelectionStrategy,
    k: usize,
) -> Result<SelectionResult> {
    let transform = strategy
        .transform()
        .ok_or_else(|| Error::arg(format!("`{}` is not a similarity strategy", strategy.name())))?;
    check_k(k, pool.len())?;
    check_names(pool)?;
    let universe = union_universe(std::iter::once(reference).chain(pool));
    let reference = flatten_features(reference, transform, &universe);
    let scored = pool
        .iter()
        .map(|tvs| {
            let f = flatten_features(tvs, transform, &universe);
            (tvs.name.clone(), cosine(&reference, &f))
        })
        .collect();
    Ok(top_k(strategy, scored, k))
}

/// Dispatches on the request's strategy.
pub fn select(request: SelectionRequest<'_>, pool: &[TaskVectorSet], k: usize) -> Result<SelectionResult> {
    match request {
        SelectionRequest::Random { seed } => {
            check_names(pool)?;
            select_random(&pool.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), k, seed)
        }
        SelectionRequest::Evaluation { model, train } => select_by_evaluation(pool, model, train, k),
        SelectionRequest::Similarity { strategy, reference } => select_by_similarity(pool, reference, strategy, k),
    }
}

/// Pool members named by `result`, in its order.
pub fn pick<'a>(pool: &'a [TaskVectorSet], result: &SelectionResult) -> Result<Vec<&'a TaskVectorSet>> {
    result
        .names
        .iter()
        .map(|n| {
            pool.iter()
                .find(|t| &t.name == n)
                .ok_or_else(|| Error::arg(format!("selected adapter `{n}` not in pool")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::{ModulePath, ModuleType};
    use crate::Mat;

    fn tvs(name: &str, values: &[f64]) -> TaskVectorSet {
        let mut t = TaskVectorSet::new(name);
        t.deltas.insert(
            ModulePath::new(0, ModuleType::QProj),
            Mat::from_vec(1, values.len(), values.to_vec()).unwrap(),
        );
        t
    }

    #[test]
    fn random_full_pool_is_a_permutation() {
        let pool = ["c", "a", "b", "d"];
        let r = select_random(&pool, 4, 1).unwrap();
        let mut names = r.names.clone();
        names.sort();
        assert_eq!(names, vec!["a", "b", "c", "d"]);
        assert_eq!(r, select_random(&pool, 4, 1).unwrap());
        assert!(select_random(&pool, 5, 1).is_err());
        let shuffled = ["d", "b", "a", "c"];
        assert_eq!(select_random(&shuffled, 2, 9).unwrap(), select_random(&pool, 2, 9).unwrap());
    }

    #[test]
    fn similarity_sign_behaviour() {
        let r = tvs("ref", &[1.0, -2.0, 0.5]);
        let pool = vec![tvs("same", &[1.0, -2.0, 0.5]), tvs("neg", &[-1.0, 2.0, -0.5])];
        let score = |s: SelectionStrategy, name: &str| {
            let res = select_by_similarity(&pool, &r, s, 2).unwrap();
            res.scores[res.names.iter().position(|n| n == name).unwrap()]
        };
        for s in [SelectionStrategy::Cosine, SelectionStrategy::Abs, SelectionStrategy::Clamp, SelectionStrategy::QuasiFim] {
            assert!((score(s, "same") - 1.0).abs() < 1e-15);
        }
        assert!((score(SelectionStrategy::Cosine, "neg") + 1.0).abs() < 1e-15);
        assert_eq!(score(SelectionStrategy::QuasiFim, "neg"), 1.0);
        assert!((score(SelectionStrategy::Abs, "neg") - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clamped_opposites_score_zero() {
        let r = tvs("ref", &[1.0, -1.0]);
        let pool = vec![tvs("opp", &[-1.0, 1.0])];
        let res = select_by_similarity(&pool, &r, SelectionStrategy::Clamp, 1).unwrap();
        assert_eq!(res.scores, vec![0.0]);
    }

    #[test]
    fn ties_break_by_name_and_zero_norm_scores_zero() {
        let r = tvs("ref", &[1.0, 0.0]);
        let pool = vec![tvs("b", &[0.0, 0.0]), tvs("a", &[0.0, 0.0]), tvs("c", &[2.0, 0.0])];
        let res = select_by_similarity(&pool, &r, SelectionStrategy::Cosine, 3).unwrap();
        assert_eq!(res.names, vec!["c", "a", "b"]);
        assert_eq!(res.scores, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn modules_missing_on_one_side_count_as_zero() {
        let r = tvs("ref", &[1.0, 1.0]);
        let mut other = TaskVectorSet::new("other");
        other
            .deltas
            .insert(ModulePath::new(0, ModuleType::KProj), Mat::filled(1, 2, 1.0));
        let res = select_by_similarity(&[other], &r, SelectionStrategy::Cosine, 1).unwrap();
        assert_eq!(res.scores, vec![0.0]);
    }

    #[test]
    fn strategy_names_parse() {
        for s in SelectionStrategy::ALL {
            assert_eq!(s.name().parse::<SelectionStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }
}
