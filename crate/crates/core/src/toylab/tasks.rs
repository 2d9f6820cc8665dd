//! Seeded synthetic token tasks with fixed train/validation/test splits.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRAIN_SIZE: usize = 80;
pub const VALIDATION_SIZE: usize = 20;
pub const DEFAULT_TEST_SIZE: usize = 200;
/// Feature width of the hidden key representation in `projection-classify`.
const KEY_FEATURES: usize = 16;

/// One prompt/answer pair of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn new(prompt: Vec<usize>, answer: Vec<usize>) -> Self {
        Self { prompt, answer }
    }

    pub fn seq_len(&self) -> usize {
        self.prompt.len() + self.answer.len() - 1
    }
}

/// Names a task: family, integer parameters and a sampling seed.
///
/// | family | params | prompt → answer |
/// |---|---|---|
/// | `modular-add` | `modulus`, `offset` | `a b SEP` → `(a+b+offset) mod modulus` |
/// | `copy` | `len`, `alphabet` | `x₁…xₙ SEP` → `x₁…xₙ` |
/// | `reverse` | `len`, `alphabet` | `x₁…xₙ SEP` → `xₙ…x₁` |
/// | `sort` | `len`, `alphabet` | `x₁…xₙ SEP` → ascending `x` |
/// | `parity` | `len` | `b₁…bₙ SEP` → `Σb mod 2` |
/// | `projection-classify` | `classes`, `keys`, `context`, `world`, `variant`, `perturb` | `d₁…d_{c-1} key` → class |
///
/// `projection-classify` labels a key by the argmax of a random linear map
/// applied to a hidden key feature vector. `world` fixes the features and
/// base map; `variant` and `perturb` (per mille) add a task-specific
/// perturbation, so tasks sharing a world agree on most keys.
///
/// Every family accepts `noise` (per mille): that fraction of answers is
/// replaced by uniform random tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub name: String,
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, i64>,
    pub seed: u64,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_vocab() -> usize {
    64
}

fn default_test_size() -> usize {
    DEFAULT_TEST_SIZE
}

/// Fixed 80/20/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    /// Training and validation examples together.
    pub fn labelled(&self) -> Vec<Example> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

#[derive(Debug, Clone)]
enum Family {
    ModularAdd { modulus: usize, offset: usize },
    Copy { len: usize, alphabet: usize },
    Reverse { len: usize, alphabet: usize },
    Sort { len: usize, alphabet: usize },
    Parity { len: usize },
    Projection(Projection),
}

#[derive(Debug, Clone)]
struct Projection {
    classes: usize,
    keys: usize,
    context: usize,
    /// Label per key, precomputed from world and variant.
    labels: Vec<usize>,
}

impl TaskDescriptor {
    pub fn new(name: impl Into<String>, family: &str, params: &[(&str, i64)], seed: u64) -> Self {
        Self {
            name: name.into(),
            family: family.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            seed,
            vocab: default_vocab(),
            test_size: default_test_size(),
        }
    }

    pub fn modular_add(modulus: i64, seed: u64) -> Self {
        Self::new(
            format!("modular-add-{modulus}"),
            "modular-add",
            &[("modulus", modulus), ("offset", 0)],
            seed,
        )
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_param(mut self, key: &str, value: i64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    /// Reserved separator token.
    pub fn sep(&self) -> usize {
        self.vocab - 1
    }

    fn param(&self, key: &str, default: Option<i64>) -> Result<i64> {
        match (self.params.get(key), default) {
            (Some(v), _) => Ok(*v),
            (None, Some(d)) => Ok(d),
            (None, None) => Err(Error::arg(format!("task {}: missing parameter `{key}`", self.name))),
        }
    }

    fn count(&self, key: &str, default: Option<i64>, min: i64, max: i64) -> Result<usize> {
        let v = self.param(key, default)?;
        if v < min || v > max {
            return Err(Error::arg(format!(
                "task {}: `{key}` = {v} outside [{min}, {max}]",
                self.name
            )));
        }
        Ok(v as usize)
    }

    fn family(&self) -> Result<Family> {
        if self.vocab < 4 {
            return Err(Error::arg(format!("task {}: vocabulary of {} is too small", self.name, self.vocab)));
        }
        let content = (self.vocab - 1) as i64;
        Ok(match self.family.as_str() {
            "modular-add" => Family::ModularAdd {
                modulus: self.count("modulus", None, 2, content)?,
                offset: self.count("offset", Some(0), 0, i64::MAX)?,
            },
            "copy" | "reverse" | "sort" => {
                let len = self.count("len", None, 1, 64)?;
                let alphabet = self.count("alphabet", None, 2, content)?;
                match self.family.as_str() {
                    "copy" => Family::Copy { len, alphabet },
                    "reverse" => Family::Reverse { len, alphabet },
                    _ => Family::Sort { len, alphabet },
                }
            }
            "parity" => Family::Parity {
                len: self.count("len", None, 1, 64)?,
            },
            "projection-classify" => {
                let classes = self.count("classes", None, 2, content)?;
                let keys = self.count("keys", None, 1, content - classes as i64)?;
                let context = self.count("context", Some(1), 1, 64)?;
                let world = self.param("world", Some(0))? as u64;
                let variant = self.param("variant", Some(0))? as u64;
                let perturb = self.count("perturb", Some(0), 0, 100_000)? as f64 / 1000.0;
                Family::Projection(Projection {
                    classes,
                    keys,
                    context,
                    labels: projection_labels(classes, keys, world, variant, perturb),
                })
            }
            other => return Err(Error::arg(format!("unknown task family `{other}`"))),
        })
    }
}

/// `argmax_c ((W + perturb·E) φ(key))_c` with `φ`, `W` drawn from `world` and `E`
/// from `(world, variant)`.
fn projection_labels(classes: usize, keys: usize, world: u64, variant: u64, perturb: f64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(world ^ 0x9e37_79b9_7f4a_7c15);
    let normal = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let features = normal(&mut rng, keys * KEY_FEATURES);
    let base = normal(&mut rng, classes * KEY_FEATURES);
    let mut vrng = ChaCha8Rng::seed_from_u64(world.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ variant);
    let noise = normal(&mut vrng, classes * KEY_FEATURES);
    let map: Vec<f64> = base.iter().zip(&noise).map(|(b, e)| b + perturb * e).collect();
    (0..keys)
        .map(|k| {
            let phi = &features[k * KEY_FEATURES..(k + 1) * KEY_FEATURES];
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    map[c * KEY_FEATURES..(c + 1) * KEY_FEATURES]
                        .iter()
                        .zip(phi)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            super::model::argmax(&scores)
        })
        .collect()
}

impl Family {
    /// Number of distinct prompts, saturating.
    fn prompt_space(&self, vocab: usize) -> u128 {
        let pow = |b: usize, e: usize| (b as u128).checked_pow(e as u32).unwrap_or(u128::MAX);
        match self {
            Family::ModularAdd { modulus, .. } => pow(*modulus, 2),
            Family::Copy { len, alphabet } | Family::Reverse { len, alphabet } | Family::Sort { len, alphabet } => {
                pow(*alphabet, *len)
            }
            Family::Parity { len } => pow(2, *len),
            Family::Projection(p) => (p.keys as u128).saturating_mul(pow(vocab - 1, p.context - 1)),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, sep: usize) -> Example {
        match self {
            Family::ModularAdd { modulus, offset } => {
                let a = rng.random_range(0..*modulus);
                let b = rng.random_range(0..*modulus);
                Example::new(vec![a, b, sep], vec![(a + b + offset) % modulus])
            }
            Family::Copy { len, alphabet } | Family::Reverse { len, alphabet } | Family::Sort { len, alphabet } => {
                let xs: Vec<usize> = (0..*len).map(|_| rng.random_range(0..*alphabet)).collect();
                let mut answer = xs.clone();
                match self {
                    Family::Reverse { .. } => answer.reverse(),
                    Family::Sort { .. } => answer.sort_unstable(),
                    _ => {}
                }
                let mut prompt = xs;
                prompt.push(sep);
                Example::new(prompt, answer)
            }
            Family::Parity { len } => {
                let bits: Vec<usize> = (0..*len).map(|_| rng.random_range(0..2)).collect();
                let parity = bits.iter().sum::<usize>() % 2;
                let mut prompt = bits;
                prompt.push(sep);
                Example::new(prompt, vec![parity])
            }
            Family::Projection(p) => {
                let mut prompt: Vec<usize> = (0..p.context - 1).map(|_| rng.random_range(0..sep)).collect();
                let key = rng.random_range(0..p.keys);
                prompt.push(p.classes + key);
                Example::new(prompt, vec![p.labels[key]])
            }
        }
    }

    fn answer_alphabet(&self) -> usize {
        match self {
            Family::ModularAdd { modulus, .. } => *modulus,
            Family::Copy { alphabet, .. } | Family::Reverse { alphabet, .. } | Family::Sort { alphabet, .. } => *alphabet,
            Family::Parity { .. } => 2,
            Family::Projection(p) => p.classes,
        }
    }
}

/// Deterministic dataset for `desc`. Splits hold distinct prompts whenever
/// the prompt space is at least twice the dataset size; smaller spaces are
/// sampled with replacement and the splits are disjoint by draw.
pub fn generate_task(desc: &TaskDescriptor) -> Result<TaskDataset> {
    let family = desc.family()?;
    if desc.test_size == 0 {
        return Err(Error::arg(format!("task {}: empty test split", desc.name)));
    }
    let noise = desc.count("noise", Some(0), 0, 1000)? as f64 / 1000.0;
    let total = TRAIN_SIZE + VALIDATION_SIZE + desc.test_size;
    let distinct = family.prompt_space(desc.vocab) >= 2 * total as u128;
    let mut rng = ChaCha8Rng::seed_from_u64(desc.seed);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(total);
    while examples.len() < total {
        let mut ex = family.sample(&mut rng, desc.sep());
        if distinct && !seen.insert(ex.prompt.clone()) {
            continue;
        }
        if noise > 0.0 && rng.random_bool(noise) {
            let alphabet = family.answer_alphabet();
            for t in &mut ex.answer {
                *t = rng.random_range(0..alphabet);
            }
        }
        examples.push(ex);
    }
    let test = examples.split_off(TRAIN_SIZE + VALIDATION_SIZE);
    let validation = examples.split_off(TRAIN_SIZE);
    Ok(TaskDataset {
        name: desc.name.clone(),
        train: examples,
        validation,
        test,
    })
}

/// A fixed mix covering every family, used as a standard suite.
pub fn standard_suite(vocab: usize, seed: u64) -> Vec<TaskDescriptor> {
    let d = |name: &str, family: &str, params: &[(&str, i64)], s: u64| {
        TaskDescriptor::new(name, family, params, seed.wrapping_add(s)).with_vocab(vocab)
    };
    let mut suite = vec![
        d("modular-add-7", "modular-add", &[("modulus", 7)], 1),
        d("modular-add-5-off2", "modular-add", &[("modulus", 5), ("offset", 2)], 2),
        d("copy-3", "copy", &[("len", 3), ("alphabet", 8)], 3),
        d("reverse-3", "reverse", &[("len", 3), ("alphabet", 8)], 4),
        d("sort-3", "sort", &[("len", 3), ("alphabet", 8)], 5),
        d("parity-3", "parity", &[("len", 3)], 6),
    ];
    for (i, world) in [11i64, 12, 13, 14].into_iter().enumerate() {
        suite.push(d(
            &format!("projection-w{world}"),
            "projection-classify",
            &[("classes", 4), ("keys", 16), ("context", 2), ("world", world)],
            7 + i as u64,
        ));
    }
    suite
}

/// Shuffles `examples` in place with a seeded generator.
pub fn shuffle_examples(examples: &mut [Example], seed: u64) {
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_answers_repeat_payload() {
        let desc = TaskDescriptor::new("c", "copy", &[("len", 4), ("alphabet", 10)], 3);
        let ds = generate_task(&desc).unwrap();
        for ex in ds.train.iter().chain(&ds.validation).chain(&ds.test) {
            assert_eq!(&ex.prompt[..4], &ex.answer[..]);
            assert_eq!(ex.prompt[4], desc.sep());
        }
    }

    #[test]
    fn generation_is_deterministic_and_sized() {
        let desc = TaskDescriptor::modular_add(7, 9);
        let a = generate_task(&desc).unwrap();
        assert_eq!(a, generate_task(&desc).unwrap());
        assert_eq!((a.train.len(), a.validation.len(), a.test.len()), (80, 20, 200));
        for ex in a.train.iter().chain(&a.validation).chain(&a.test) {
            assert!(ex.answer[0] < 7);
        }
    }

    #[test]
    fn large_prompt_spaces_give_disjoint_splits() {
        let desc = TaskDescriptor::new("r", "reverse", &[("len", 4), ("alphabet", 8)], 1);
        let ds = generate_task(&desc).unwrap();
        let train: HashSet<_> = ds.train.iter().map(|e| e.prompt.clone()).collect();
        assert!(ds.test.iter().all(|e| !train.contains(&e.prompt)));
        assert!(ds.validation.iter().all(|e| !train.contains(&e.prompt)));
    }

    #[test]
    fn unknown_family_is_an_argument_error() {
        let desc = TaskDescriptor::new("x", "haiku", &[], 0);
        assert!(matches!(generate_task(&desc), Err(Error::Argument(_))));
        let missing = TaskDescriptor::new("m", "modular-add", &[], 0);
        assert!(matches!(generate_task(&missing), Err(Error::Argument(_))));
    }

    #[test]
    fn perturbation_controls_agreement() {
        let base = projection_labels(4, 40, 5, 0, 0.0);
        let near = projection_labels(4, 40, 5, 1, 0.2);
        let far = projection_labels(4, 40, 6, 0, 0.0);
        let agree = |a: &[usize], b: &[usize]| a.iter().zip(b).filter(|(x, y)| x == y).count();
        assert!(agree(&base, &near) > agree(&base, &far));
        assert_eq!(projection_labels(4, 40, 5, 3, 0.0), base);
    }

    #[test]
    fn noise_replaces_some_answers() {
        let clean = TaskDescriptor::new("p", "parity", &[("len", 6)], 2);
        let noisy = clean.clone().with_param("noise", 1000);
        let a = generate_task(&clean).unwrap();
        let b = generate_task(&noisy).unwrap();
        let correct = |ds: &TaskDataset| {
            ds.test
                .iter()
                .filter(|e| e.prompt[..6].iter().sum::<usize>() % 2 == e.answer[0])
                .count()
        };
        assert_eq!(correct(&a), a.test.len());
        assert!(correct(&b) < b.test.len());
    }

    #[test]
    fn descriptor_round_trips_through_json() {
        let desc = TaskDescriptor::modular_add(7, 1);
        let text = serde_json::to_string(&desc).unwrap();
        assert_eq!(serde_json::from_str::<TaskDescriptor>(&text).unwrap(), desc);
    }
}
