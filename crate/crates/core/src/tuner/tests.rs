use super::*;
use crate::toylab::{generate_task, ModelConfig, TaskDescriptor};

fn tiny() -> ToyModel {
    let cfg = ModelConfig {
        vocab: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq: 8,
    };
    ToyModel::new(cfg, 3).unwrap()
}

fn data() -> TaskDataset {
    generate_task(&TaskDescriptor::modular_add(5, 11).with_vocab(16)).unwrap()
}

fn random_adapter(model: &ToyModel, name: &str, seed: u64) -> LoraAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank = 2;
    let pairs: Vec<_> = model
        .config
        .module_paths()
        .into_iter()
        .map(|p| {
            let (n, m) = model.config.module_shape(p.module);
            let a = Mat::from_fn(rank, m, |_, _| rng.random_range(-0.5..0.5));
            let b = Mat::from_fn(n, rank, |_, _| rng.random_range(-0.5..0.5));
            (p, a, b)
        })
        .collect();
    LoraAdapter::new(name, 4.0, rank, Variant::Standard, pairs).unwrap()
}

fn pool(model: &ToyModel, k: usize) -> Vec<TaskVectorSet> {
    (0..k)
        .map(|i| materialize_task_vectors(&random_adapter(model, &format!("a{i}"), i as u64)).unwrap())
        .collect()
}

fn short(mut cfg: TuneConfig, steps: usize) -> TuneConfig {
    cfg.steps = steps;
    cfg
}

#[test]
fn zero_init_starts_at_base_loss() {
    let model = tiny();
    let d = data();
    let sets = pool(&model, 3);
    let refs: Vec<_> = sets.iter().collect();
    let base = model.forward_loss(None, &d.train).unwrap();
    for act in [Activation::LeakyRelu, Activation::Linear] {
        let cfg = short(TuneConfig::grad_based(Granularity::Module, act, CoefficientInit::Zeros), 2);
        let res = tune_gradient_based(&model, &refs, &cfg, &d).unwrap();
        assert_eq!(res.runs[0].history[0].train_loss.to_bits(), base.to_bits());
    }
}

#[test]
fn selected_step_is_history_minimum() {
    let model = tiny();
    let d = data();
    let sets = pool(&model, 3);
    let refs: Vec<_> = sets.iter().collect();
    let cfg = short(TuneConfig::grad_based(Granularity::Layer, Activation::Linear, CoefficientInit::OneOverK), 6);
    let res = tune_gradient_based(&model, &refs, &cfg, &d).unwrap();
    let run = &res.runs[0];
    assert_eq!(run.history.len(), 7);
    let min = run.history.iter().map(|h| h.metric).fold(f64::INFINITY, f64::min);
    assert_eq!(run.best_metric, min);
    assert_eq!(run.history[run.selected_step].metric, min);
    let recomputed = merged_loss(&model, &refs, &res.table(0), &Batch::new(&d.validation, &model.config).unwrap()).unwrap();
    assert_eq!(recomputed, min);
}

#[test]
fn coefficient_gradient_matches_finite_differences() {
    let model = tiny();
    let d = data();
    let sets = pool(&model, 2);
    let refs: Vec<_> = sets.iter().collect();
    for (act, gran) in [
        (Activation::Softmax, Granularity::Sublayer),
        (Activation::LeakyRelu, Granularity::Module),
        (Activation::Linear, Granularity::Model),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Mat::from_fn(2, gran.group_count(1), |_, _| rng.random_range(-0.8..0.8));
        let table = CoefficientTable::from_raw(raw.clone(), 1, gran, act).unwrap();
        let (_, grad) = merged_loss_and_grad(&model, &refs, &table, &d.train).unwrap();
        let batch = Batch::new(&d.train, &model.config).unwrap();
        let h = 1e-6;
        for i in 0..raw.rows() {
            for j in 0..raw.cols() {
                let mut plus = raw.clone();
                plus.set(i, j, raw.get(i, j) + h);
                let mut minus = raw.clone();
                minus.set(i, j, raw.get(i, j) - h);
                let lp = merged_loss(&model, &refs, &CoefficientTable::from_raw(plus, 1, gran, act).unwrap(), &batch).unwrap();
                let lm = merged_loss(&model, &refs, &CoefficientTable::from_raw(minus, 1, gran, act).unwrap(), &batch).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let g = grad.get(i, j);
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "{act:?} {gran:?} ({i},{j}): {g} vs {fd}");
            }
        }
    }
}

#[test]
fn tuning_is_deterministic() {
    let model = tiny();
    let d = data();
    let sets = pool(&model, 2);
    let refs: Vec<_> = sets.iter().collect();
    let cfg = short(TuneConfig::grad_based(Granularity::Module, Activation::LeakyRelu, CoefficientInit::Zeros), 3);
    let a = tune_gradient_based(&model, &refs, &cfg, &d).unwrap();
    let b = tune_gradient_based(&model, &refs, &cfg, &d).unwrap();
    assert_eq!(a.runs[0].raw, b.runs[0].raw);
    assert_eq!(a.runs[0].history, b.runs[0].history);
}

#[test]
fn grad_free_best_so_far_never_increases() {
    let model = tiny();
    let d = data();
    let adapters: Vec<_> = (0..3).map(|i| random_adapter(&model, &format!("a{i}"), i)).collect();
    let cfg = short(TuneConfig::grad_free().with_seed(9), 8);
    let res = tune_gradient_free(&model, &adapters, &cfg, &d).unwrap();
    let run = &res.runs[0];
    assert_eq!(run.history.len(), 9);
    assert_eq!(run.history[0].metric, model.forward_loss(None, &d.labelled()).unwrap());
    for w in run.history.windows(2) {
        assert!(w[1].metric <= w[0].metric);
    }
    assert_eq!(run.best_metric, run.history.last().unwrap().metric);
    let again = tune_gradient_free(&model, &adapters, &cfg, &d).unwrap();
    assert_eq!(again.runs[0].raw, run.raw);
}

#[test]
fn joint_tuning_moves_adapters_only() {
    let model = tiny();
    let d = data();
    let mut adapters: Vec<_> = (0..2).map(|i| random_adapter(&model, &format!("a{i}"), i)).collect();
    adapters.push(untrained_adapter(&model, "fresh", 2, 4).unwrap());
    let before: Vec<f64> = adapters.iter().map(|a| a.checksum()).collect();
    let mut cfg = short(TuneConfig::joint(), 3);
    cfg.lrs = vec![1e-2, 5e-3];
    cfg.optimizer = OptimizerKind::adam();
    let res = tune_joint(&model, &adapters, &cfg, &d).unwrap();
    assert_eq!(res.runs.len(), 2);
    let after: Vec<f64> = adapters.iter().map(|a| a.checksum()).collect();
    assert_eq!(before, after);
    for run in &res.runs {
        let min = run.history.iter().map(|h| h.metric).fold(f64::INFINITY, f64::min);
        assert_eq!(run.best_metric, min);
        if run.selected_step > 0 {
            let tuned = run.adapters.as_ref().unwrap();
            assert!(tuned.iter().zip(&before).any(|(a, c)| a.checksum() != *c));
        }
    }
}

#[test]
fn single_mode_scales_one_adapter() {
    let model = tiny();
    let d = data();
    let set = &pool(&model, 1)[0];
    let res = tune_single(&model, set, &short(TuneConfig::single(), 2), &d).unwrap();
    assert_eq!(res.runs[0].raw.rows(), 1);
    assert_eq!(res.runs[0].raw.cols(), 7);
    assert!(tune_single(&model, set, &short(TuneConfig::grad_free(), 2), &d).is_err());
}

#[test]
fn rejects_bad_configs() {
    let model = tiny();
    let d = data();
    let sets = pool(&model, 1);
    let refs: Vec<_> = sets.iter().collect();
    let mut cfg = TuneConfig::grad_based(Granularity::Model, Activation::Linear, CoefficientInit::Zeros);
    cfg.steps = 0;
    assert!(tune_gradient_based(&model, &refs, &cfg, &d).is_err());
    cfg.steps = 1;
    cfg.lrs = vec![0.1, 0.2];
    assert!(tune_gradient_based(&model, &refs, &cfg, &d).is_err());
    assert!(tune_gradient_based(&model, &[], &short(TuneConfig::single(), 1), &d).is_err());
}
