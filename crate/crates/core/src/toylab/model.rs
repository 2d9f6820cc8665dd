use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModulePath, ModuleType};
use super::tasks::Example;
use crate::adapter::TaskVectorSet;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Segment, Tape};
use crate::Mat;

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Mat,
    pub mlp_norm: Mat,
    /// Indexed by [`ModuleType::index`]; each is stored `out×in`.
    pub projections: [Mat; 7],
}

/// Small decoder-only transformer with Llama-style blocks and learned
/// absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub layers: Vec<Layer>,
    pub final_norm: Mat,
    pub head: Mat,
}

/// Examples packed into one row-stacked sequence batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// `(row, expected token)` for every answer position.
    pub targets: Vec<(usize, usize)>,
    /// Target index ranges per example, into `targets`.
    pub example_targets: Vec<std::ops::Range<usize>>,
}

impl Batch {
    /// Packs teacher-forced sequences `prompt ++ answer[..len-1]`.
    pub fn new(examples: &[Example], cfg: &ModelConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::arg("batch must contain at least one example"));
        }
        let mut b = Batch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(examples.len()),
            targets: Vec::new(),
            example_targets: Vec::with_capacity(examples.len()),
        };
        for ex in examples {
            if ex.prompt.is_empty() || ex.answer.is_empty() {
                return Err(Error::arg("examples need a non-empty prompt and answer"));
            }
            let len = ex.prompt.len() + ex.answer.len() - 1;
            if len > cfg.max_seq {
                return Err(Error::arg(format!(
                    "sequence of {len} tokens exceeds max_seq {}",
                    cfg.max_seq
                )));
            }
            if let Some(t) = ex.prompt.iter().chain(&ex.answer).find(|&&t| t >= cfg.vocab) {
                return Err(Error::arg(format!("token {t} outside vocabulary of {}", cfg.vocab)));
            }
            let start = b.tokens.len();
            b.tokens.extend_from_slice(&ex.prompt);
            b.tokens.extend_from_slice(&ex.answer[..ex.answer.len() - 1]);
            b.positions.extend(0..len);
            b.segments.push(Segment { start, len });
            let t0 = b.targets.len();
            for (i, &tok) in ex.answer.iter().enumerate() {
                b.targets.push((start + ex.prompt.len() - 1 + i, tok));
            }
            b.example_targets.push(t0..b.targets.len());
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

impl ToyModel {
    /// Seeded construction: normal(0, 0.02) everywhere except the two
    /// residual-output projections, which start at zero, and unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token_embedding = Mat::randn(config.vocab, d, INIT_STD, &mut rng);
        let position_embedding = Mat::randn(config.max_seq, d, INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| {
                let projections = ModuleType::ALL.map(|m| {
                    let (n, k) = config.module_shape(m);
                    match m {
                        ModuleType::OProj | ModuleType::DownProj => Mat::zeros(n, k),
                        _ => Mat::randn(n, k, INIT_STD, &mut rng),
                    }
                });
                Layer {
                    attn_norm: Mat::filled(1, d, 1.0),
                    mlp_norm: Mat::filled(1, d, 1.0),
                    projections,
                }
            })
            .collect();
        let head = Mat::randn(config.vocab, d, INIT_STD, &mut rng);
        Ok(Self {
            config,
            seed,
            token_embedding,
            position_embedding,
            layers,
            final_norm: Mat::filled(1, d, 1.0),
            head,
        })
    }

    pub fn weight(&self, path: ModulePath) -> &Mat {
        &self.layers[path.layer].projections[path.module.index()]
    }

    pub fn weight_mut(&mut self, path: ModulePath) -> &mut Mat {
        &mut self.layers[path.layer].projections[path.module.index()]
    }

    /// Copy of the model with `overlay` added into the projection weights.
    pub fn fold(&self, overlay: &TaskVectorSet) -> Result<Self> {
        overlay.check_shapes(&self.config)?;
        let mut out = self.clone();
        for (path, delta) in &overlay.deltas {
            let w = out.weight_mut(*path);
            *w = w.add(delta)?;
        }
        Ok(out)
    }

    /// Places `overlay` on the tape as constant delta nodes.
    pub fn overlay_nodes(&self, tape: &mut Tape<f64>, overlay: Option<&TaskVectorSet>) -> Result<DeltaNodes> {
        let mut nodes = BTreeMap::new();
        if let Some(tvs) = overlay {
            tvs.check_shapes(&self.config)?;
            for (path, d) in &tvs.deltas {
                nodes.insert(*path, tape.constant(d.clone()));
            }
        }
        Ok(nodes)
    }

    /// Records the forward pass and returns the `rows×vocab` logits node.
    /// Each projection uses `W + Δ` when `deltas` has an entry for it.
    pub fn forward_logits(&self, tape: &mut Tape<f64>, batch: &Batch, deltas: &DeltaNodes) -> Result<NodeId> {
        let cfg = &self.config;
        for (path, &node) in deltas {
            let want = cfg.module_shape(path.module);
            let got = tape.value(node).shape();
            if !cfg.contains(*path) || got != want {
                return Err(Error::Dimension {
                    op: "overlay",
                    left: got,
                    right: want,
                });
            }
        }
        let tok_table = tape.constant(self.token_embedding.clone());
        let pos_table = tape.constant(self.position_embedding.clone());
        let tok = tape.gather(tok_table, batch.tokens.clone())?;
        let pos = tape.gather(pos_table, batch.positions.clone())?;
        let mut h = tape.add(tok, pos)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let proj = |tape: &mut Tape<f64>, x: NodeId, m: ModuleType| -> Result<NodeId> {
                let path = ModulePath::new(l, m);
                let base = tape.constant(layer.projections[m.index()].clone());
                let w = match deltas.get(&path) {
                    Some(&d) => tape.add(base, d)?,
                    None => base,
                };
                tape.matmul_nt(x, w)
            };
            let g = tape.constant(layer.attn_norm.clone());
            let x = tape.rms_norm(h, g, NORM_EPS)?;
            let q = proj(tape, x, ModuleType::QProj)?;
            let k = proj(tape, x, ModuleType::KProj)?;
            let v = proj(tape, x, ModuleType::VProj)?;
            let att = tape.causal_attention(q, k, v, cfg.n_heads, batch.segments.clone())?;
            let o = proj(tape, att, ModuleType::OProj)?;
            h = tape.add(h, o)?;

            let g = tape.constant(layer.mlp_norm.clone());
            let x = tape.rms_norm(h, g, NORM_EPS)?;
            let gate = proj(tape, x, ModuleType::GateProj)?;
            let gate = tape.silu(gate);
            let up = proj(tape, x, ModuleType::UpProj)?;
            let act = tape.hadamard(gate, up)?;
            let down = proj(tape, act, ModuleType::DownProj)?;
            h = tape.add(h, down)?;
        }
        let g = tape.constant(self.final_norm.clone());
        let x = tape.rms_norm(h, g, NORM_EPS)?;
        let head = tape.constant(self.head.clone());
        tape.matmul_nt(x, head)
    }

    /// Mean answer-token cross-entropy node.
    pub fn loss_node(&self, tape: &mut Tape<f64>, batch: &Batch, deltas: &DeltaNodes) -> Result<NodeId> {
        let logits = self.forward_logits(tape, batch, deltas)?;
        tape.cross_entropy(logits, batch.targets.clone())
    }

    /// Mean answer-token cross-entropy with `overlay` applied at forward time.
    pub fn forward_loss(&self, overlay: Option<&TaskVectorSet>, examples: &[Example]) -> Result<f64> {
        let batch = Batch::new(examples, &self.config)?;
        let mut tape = Tape::new();
        let deltas = self.overlay_nodes(&mut tape, overlay)?;
        let loss = self.loss_node(&mut tape, &batch, &deltas)?;
        Ok(tape.scalar(loss))
    }

    /// Exact-match accuracy. Teacher-forced argmax over the answer positions
    /// reproduces greedy decoding: the first wrong greedy token is also the
    /// first wrong teacher-forced argmax.
    pub fn evaluate_accuracy(&self, overlay: Option<&TaskVectorSet>, examples: &[Example]) -> Result<f64> {
        let hits = self.exact_matches(overlay, examples)?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
    }

    /// Per-example exact-match flags.
    pub fn exact_matches(&self, overlay: Option<&TaskVectorSet>, examples: &[Example]) -> Result<Vec<bool>> {
        let batch = Batch::new(examples, &self.config)?;
        let mut tape = Tape::new();
        let deltas = self.overlay_nodes(&mut tape, overlay)?;
        let logits = self.forward_logits(&mut tape, &batch, &deltas)?;
        let lv = tape.value(logits);
        Ok(batch
            .example_targets
            .iter()
            .map(|r| batch.targets[r.clone()].iter().all(|&(row, tok)| argmax(lv.row(row)) == tok))
            .collect())
    }

    /// Autoregressive greedy decoding of `len` tokens after `prompt`.
    pub fn greedy_decode(&self, overlay: Option<&TaskVectorSet>, prompt: &[usize], len: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::arg("greedy decoding needs a prompt"));
        }
        let cfg = &self.config;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(len);
        let mut tape = Tape::new();
        let deltas = self.overlay_nodes(&mut tape, overlay)?;
        let base_len = tape.len();
        for _ in 0..len {
            if seq.len() > cfg.max_seq {
                return Err(Error::arg("decoded sequence exceeds max_seq"));
            }
            tape.truncate(base_len);
            let batch = Batch {
                tokens: seq.clone(),
                positions: (0..seq.len()).collect(),
                segments: vec![Segment { start: 0, len: seq.len() }],
                targets: Vec::new(),
                example_targets: Vec::new(),
            };
            let logits = self.forward_logits(&mut tape, &batch, &deltas)?;
            let next = argmax(tape.value(logits).row(seq.len() - 1));
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Delta node per adapted module, as consumed by [`ToyModel::forward_logits`].
pub type DeltaNodes = BTreeMap<ModulePath, NodeId>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::tasks::Example;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 8,
        }
    }

    fn examples() -> Vec<Example> {
        vec![
            Example::new(vec![1, 2, 3], vec![4, 5]),
            Example::new(vec![7], vec![2]),
            Example::new(vec![3, 3, 15], vec![0]),
        ]
    }

    fn random_overlay(model: &ToyModel, seed: u64) -> TaskVectorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tvs = TaskVectorSet::new("r");
        for p in model.config.module_paths() {
            let (n, m) = model.config.module_shape(p.module);
            tvs.deltas.insert(p, Mat::randn(n, m, 0.3, &mut rng));
        }
        tvs
    }

    #[test]
    fn construction_is_deterministic() {
        assert_eq!(ToyModel::new(cfg(), 3).unwrap(), ToyModel::new(cfg(), 3).unwrap());
        assert_ne!(ToyModel::new(cfg(), 3).unwrap(), ToyModel::new(cfg(), 4).unwrap());
        let bad = ModelConfig { d_model: 9, ..cfg() };
        assert!(matches!(ToyModel::new(bad, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn batch_targets_follow_answers() {
        let b = Batch::new(&examples(), &cfg()).unwrap();
        assert_eq!(b.tokens, vec![1, 2, 3, 4, 7, 3, 3, 15]);
        assert_eq!(b.targets, vec![(2, 4), (3, 5), (4, 2), (7, 0)]);
        assert_eq!(b.segments[2], Segment { start: 5, len: 3 });
    }

    #[test]
    fn zero_overlay_is_bit_identical() {
        let model = ToyModel::new(cfg(), 1).unwrap();
        let base = model.forward_loss(None, &examples()).unwrap();
        let zero = TaskVectorSet::zeros("z", &model.config);
        assert_eq!(model.forward_loss(Some(&zero), &examples()).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = ToyModel::new(cfg(), 1).unwrap();
        let loss = model.forward_loss(None, &examples()).unwrap();
        assert!((loss - 16f64.ln()).abs() < 0.2, "{loss}");
    }

    #[test]
    fn folding_matches_overlay() {
        let model = ToyModel::new(cfg(), 2).unwrap();
        let tvs = random_overlay(&model, 5);
        let a = model.forward_loss(Some(&tvs), &examples()).unwrap();
        let b = model.fold(&tvs).unwrap().forward_loss(None, &examples()).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn wrong_overlay_shape_is_a_dimension_error() {
        let model = ToyModel::new(cfg(), 2).unwrap();
        let mut tvs = TaskVectorSet::new("bad");
        tvs.deltas.insert(ModulePath::new(0, ModuleType::QProj), Mat::zeros(3, 3));
        assert!(matches!(model.forward_loss(Some(&tvs), &examples()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn greedy_self_consistency() {
        let model = ToyModel::new(cfg(), 7).unwrap();
        let tvs = random_overlay(&model, 8);
        let prompts = [vec![1, 2, 3], vec![9, 9], vec![4]];
        let examples: Vec<Example> = prompts
            .iter()
            .map(|p| Example::new(p.clone(), model.greedy_decode(Some(&tvs), p, 3).unwrap()))
            .collect();
        assert_eq!(model.evaluate_accuracy(Some(&tvs), &examples).unwrap(), 1.0);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
