use proptest::prelude::*;

use lora_recycle::adapter::{
    load_adapter, load_task_vectors, materialize_task_vectors, pad_to_rank, save_adapter, save_task_vectors,
    validate_adapter, LoraAdapter, StorageDtype, Variant, DEFAULT_MAGNITUDE_CAP,
};
use lora_recycle::selection::{cosine, select_by_similarity, SelectionStrategy};
use lora_recycle::toylab::{ModelConfig, ModulePath};
use lora_recycle::Mat;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab: 8,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 6,
        max_seq: 4,
    }
}

fn adapter_strategy() -> impl Strategy<Value = LoraAdapter> {
    let paths = cfg().module_paths();
    let n_paths = paths.len();
    (
        1usize..=3,
        0.5f64..16.0,
        any::<bool>(),
        prop::sample::select(vec![StorageDtype::F16, StorageDtype::BF16, StorageDtype::F32, StorageDtype::F64]),
        prop::sample::subsequence(paths, 1..=n_paths),
        any::<u64>(),
    )
        .prop_map(|(rank, alpha, rs, dtype, paths, seed)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(ModulePath, Mat, Mat)> = paths
                .into_iter()
                .map(|p| {
                    let (n, m) = cfg().module_shape(p.module);
                    (p, Mat::randn(rank, m, 0.5, &mut rng), Mat::randn(n, rank, 0.5, &mut rng))
                })
                .collect();
            let variant = if rs { Variant::RankStabilized } else { Variant::Standard };
            let mut a = LoraAdapter::new("prop", alpha, rank, variant, pairs).unwrap();
            a.dtype = dtype;
            a.quantized()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn file_round_trip_is_exact(a in adapter_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.safetensors");
        save_adapter(&a, &path).unwrap();
        let back = load_adapter(&path, &cfg()).unwrap();
        prop_assert_eq!(&back, &a);
        let first = std::fs::read(&path).unwrap();
        save_adapter(&back, &path).unwrap();
        prop_assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn padding_preserves_deltas(a in adapter_strategy(), extra in 0usize..4) {
        let padded = pad_to_rank(&a, a.rank + extra).unwrap();
        prop_assert_eq!(padded.rank, a.rank + extra);
        prop_assert_eq!(materialize_task_vectors(&padded).unwrap(), materialize_task_vectors(&a).unwrap());
    }

    #[test]
    fn scaling_follows_variant(a in adapter_strategy()) {
        let tvs = materialize_task_vectors(&a).unwrap();
        let s = match a.variant {
            Variant::Standard => a.alpha / a.rank as f64,
            Variant::RankStabilized => a.alpha / (a.rank as f64).sqrt(),
        };
        for (p, pair) in &a.modules {
            let want = pair.b.matmul(&pair.a).unwrap().scale(s);
            prop_assert!(tvs.deltas[p].sub(&want).unwrap().max_abs() < 1e-12);
        }
    }

    #[test]
    fn planted_defects_are_rejected(a in adapter_strategy(), which in 0usize..3) {
        prop_assert!(validate_adapter(&a, &cfg(), DEFAULT_MAGNITUDE_CAP).accepted());
        let mut bad = a.clone();
        let pair = bad.modules.values_mut().next().unwrap();
        let (value, kind) = match which {
            0 => (f64::NAN, "nan-or-inf"),
            1 => (f64::NEG_INFINITY, "nan-or-inf"),
            _ => (DEFAULT_MAGNITUDE_CAP * 2.0, "abnormal-magnitude"),
        };
        pair.a.set(0, 0, value);
        let report = validate_adapter(&bad, &cfg(), DEFAULT_MAGNITUDE_CAP);
        prop_assert!(!report.accepted());
        prop_assert!(report.has(kind));
    }

    #[test]
    fn similarity_ignores_positive_scale(a in adapter_strategy(), b in adapter_strategy(), c in 0.01f64..100.0) {
        let ta = materialize_task_vectors(&a).unwrap();
        let mut tb = materialize_task_vectors(&b).unwrap();
        tb.name = "other".into();
        let scaled = tb.scale(c);
        for s in [SelectionStrategy::Cosine, SelectionStrategy::Abs, SelectionStrategy::Clamp, SelectionStrategy::QuasiFim] {
            let x = select_by_similarity(std::slice::from_ref(&tb), &ta, s, 1).unwrap().scores[0];
            let y = select_by_similarity(std::slice::from_ref(&scaled), &ta, s, 1).unwrap().scores[0];
            prop_assert!((x - y).abs() < 1e-9, "{s:?}: {x} vs {y}");
        }
    }

    #[test]
    fn quasi_fim_is_sign_blind(a in adapter_strategy()) {
        let t = materialize_task_vectors(&a).unwrap();
        let neg = t.scale(-1.0);
        let score = select_by_similarity(std::slice::from_ref(&neg), &t, SelectionStrategy::QuasiFim, 1).unwrap().scores[0];
        prop_assert_eq!(score, 1.0);
    }
}

#[test]
fn task_vectors_round_trip_in_f64() {
    let a = LoraAdapter::new(
        "tv",
        2.0,
        1,
        Variant::Standard,
        cfg().module_paths().into_iter().map(|p| {
            let (n, m) = cfg().module_shape(p.module);
            (p, Mat::filled(1, m, 0.25), Mat::filled(n, 1, -1.5))
        }),
    )
    .unwrap();
    let tvs = materialize_task_vectors(&a).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tv.safetensors");
    save_task_vectors(&tvs, &path, StorageDtype::F64).unwrap();
    assert_eq!(load_task_vectors(&path).unwrap(), tvs);
}

#[test]
fn cosine_guards_zero_vectors() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    assert_eq!(cosine(&[3.0, -4.0], &[3.0, -4.0]), 1.0);
}
