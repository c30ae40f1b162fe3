use addlc_core::combo::{AdditiveCombo, BudgetScope, ComboSpec, SchemeSpec};
use addlc_core::container::{read_container, write_container};
use addlc_core::cstep::{cstep, cstep_backfit, CStepConfig};
use addlc_core::inference::{compressed_forward, OpCounter};
use addlc_core::kmeans::{kmeans, KMeansInit};
use addlc_core::metrics::{
    bits_lowrank, bits_quantized, bits_total, decode_sparse_indices, encode_sparse_indices,
    MetricsReport, StorageConfig,
};
use addlc_core::model::{forward, Activation, DenseLayer, LossKind, ModelSpec};
use addlc_core::schemes::{prune_project, CompressedPart};
use addlc_core::WeightStore;
use proptest::prelude::*;
use proptest::sample::subsequence;

fn vector(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..=max_len)
}

/// Smallest k-means objective over every assignment of points to `k` labels.
fn brute_force_kmeans(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (&v, &l) in values.iter().zip(&labels) {
            sum[l] += v;
            cnt[l] += 1;
        }
        let obj: f64 = values
            .iter()
            .zip(&labels)
            .map(|(&v, &l)| {
                let c = sum[l] / cnt[l] as f64;
                (v - c) * (v - c)
            })
            .sum();
        best = best.min(obj);
        let mut i = 0;
        while i < n {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn mlp(dims: &[usize]) -> ModelSpec {
    let last = dims.len() - 2;
    ModelSpec {
        layers: dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| DenseLayer {
                in_dim: d[0],
                out_dim: d[1],
                activation: if l == last {
                    Activation::Softmax
                } else {
                    Activation::Relu
                },
            })
            .collect(),
        loss: LossKind::CrossEntropy,
        weight_decay: 0.0,
    }
}

fn scheme_pool() -> impl Strategy<Value = Vec<SchemeSpec>> {
    let one = prop_oneof![
        (1usize..4).prop_map(|k| SchemeSpec::AdaptiveQuant { k }),
        Just(SchemeSpec::FixedQuant {
            codebook: vec![-0.5, 0.0, 0.5],
        }),
        (0usize..6).prop_map(|kappa| SchemeSpec::Prune {
            kappa,
            scope: BudgetScope::Global,
        }),
        (0usize..3).prop_map(|kappa| SchemeSpec::Prune {
            kappa,
            scope: BudgetScope::PerGroup,
        }),
        (0usize..3).prop_map(|rank| SchemeSpec::LowRank { rank }),
    ];
    prop::collection::vec(one, 1..=3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pruning_splits_energy(w in vector(40), frac in 0.0f64..=1.0) {
        let budget = (frac * w.len() as f64) as usize;
        let s = prune_project(&w, budget).unwrap();
        let dense = s.decompress(w.len()).unwrap();
        let kept: f64 = dense.iter().map(|v| v * v).sum();
        let dropped: f64 = w.iter().zip(&dense).map(|(a, b)| (a - b) * (a - b)).sum();
        let total: f64 = w.iter().map(|v| v * v).sum();
        prop_assert!((kept + dropped - total).abs() <= 1e-12 * total.max(1.0));
        let min_kept = s.values().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        for (i, v) in w.iter().enumerate() {
            if !s.indices().contains(&i) {
                prop_assert!(v.abs() <= min_kept);
            }
        }
    }

    #[test]
    fn adaptive_quantization_is_globally_optimal(w in vector(8), k in 1usize..=3) {
        prop_assume!(k <= w.len());
        let got = kmeans(&w, k, &KMeansInit::Optimal).objective;
        let oracle = brute_force_kmeans(&w, k);
        prop_assert!((got - oracle).abs() <= 1e-9 * oracle.max(1e-12), "{got} vs {oracle}");
    }

    #[test]
    fn sparse_indices_round_trip(
        n in 1usize..10_000,
        p in prop::sample::select(vec![4u32, 8, 16]),
        density in 0.0f64..0.05,
        seed in any::<u64>(),
    ) {
        let mut state = seed | 1;
        let indices: Vec<usize> = (0..n)
            .filter(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 10_000) as f64 / 10_000.0 < density
            })
            .collect();
        let enc = encode_sparse_indices(&indices, p).unwrap();
        prop_assert!(enc.pairs.iter().all(|pair| pair.delta < (1 << p)));
        prop_assert_eq!(decode_sparse_indices(&enc.pairs), indices);
    }

    #[test]
    fn sparse_round_trip_from_subsequence(
        idx in subsequence((0..2000usize).collect::<Vec<_>>(), 0..100),
        p in prop::sample::select(vec![4u32, 8, 16]),
    ) {
        let enc = encode_sparse_indices(&idx, p).unwrap();
        prop_assert_eq!(enc.bits(16), enc.pair_count() as u64 * (p as u64 + 16));
        prop_assert_eq!(decode_sparse_indices(&enc.pairs), idx);
    }

    #[test]
    fn storage_is_additive(
        dims in prop::collection::vec(2usize..7, 2..=4),
        joint in any::<bool>(),
        schemes in scheme_pool(),
        seed in any::<u64>(),
    ) {
        let model = mlp(&dims);
        let mut store = model.init(seed);
        store.set_compress_biases(joint);
        let spec = match ComboSpec::for_store(&store, schemes) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let combo = cstep(store.values(), &AdditiveCombo::new(spec), &CStepConfig::default()).unwrap().combo;
        let cfg = StorageConfig::default();
        let got = bits_total(&combo, store.len(), &cfg).unwrap();

        let mut expected = 0u64;
        let mut covered = 0;
        for (gi, g) in combo.groups().iter().enumerate() {
            covered += g.len();
            for p in 0..combo.num_parts() {
                expected += match combo.theta(p, gi).unwrap() {
                    CompressedPart::Quantization(q) => bits_quantized(1, q.k(), g.len()),
                    CompressedPart::SparseCorrection(s) => {
                        encode_sparse_indices(s.indices(), 8).unwrap().pair_count() as u64 * 24
                    }
                    CompressedPart::LowRank(f) => bits_lowrank(f.cols(), f.rows(), f.rank()),
                };
            }
        }
        expected += 32 * (store.len() - covered) as u64;
        prop_assert_eq!(got.total, expected);
        let summed: u64 = got.groups.iter().flat_map(|g| g.part_bits.iter()).sum::<u64>() + got.uncompressed_bits;
        prop_assert_eq!(got.total, summed);
    }

    #[test]
    fn cheaper_part_raises_storage_ratio(dims in prop::collection::vec(3usize..9, 2..=3), k in 1usize..4) {
        let model = mlp(&dims);
        let store = model.init(1);
        let cfg = StorageConfig::default();
        let reference = AdditiveCombo::new(ComboSpec::new(Vec::new(), Vec::new()).unwrap());
        let base = MetricsReport::new(&reference, &model, &cfg).unwrap();
        prop_assert_eq!(base.rho_s, 1.0);
        let spec = ComboSpec::for_store(&store, vec![SchemeSpec::AdaptiveQuant { k }]).unwrap();
        let combo = cstep(store.values(), &AdditiveCombo::new(spec), &CStepConfig::default()).unwrap().combo;
        let r = MetricsReport::new(&combo, &model, &cfg).unwrap();
        let cheaper = r.storage.groups.iter().zip(combo.groups()).all(|(b, g)| b.part_bits[0] < 32 * g.len() as u64);
        if cheaper {
            prop_assert!(r.rho_s > 1.0);
        }
    }

    #[test]
    fn backfit_half_steps_never_increase(w in vector(30), schemes in scheme_pool()) {
        let store = WeightStore::from_matrix(
            w.len(),
            1,
            w.clone(),
        ).unwrap();
        let spec = match ComboSpec::for_store(&store, schemes) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let fit = cstep_backfit(&w, &AdditiveCombo::new(spec), 30, 0.0).unwrap();
        for pair in fit.trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12 * pair[0].max(1.0), "{:?}", fit.trace);
        }
    }

    #[test]
    fn container_round_trip(
        dims in prop::collection::vec(2usize..8, 2..=3),
        joint in any::<bool>(),
        schemes in scheme_pool(),
        p in prop::sample::select(vec![2u32, 4, 8]),
        seed in any::<u64>(),
    ) {
        let model = mlp(&dims);
        let mut store = model.init(seed);
        store.set_compress_biases(joint);
        let spec = match ComboSpec::for_store(&store, schemes) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let combo = cstep(store.values(), &AdditiveCombo::new(spec), &CStepConfig::default()).unwrap().combo;
        let cfg = StorageConfig { index_delta_bits: p, ..StorageConfig::default() };
        let bytes = write_container(&combo, &store, &cfg).unwrap();
        let decoded = read_container(&bytes).unwrap();
        let bits = bits_total(&combo, store.len(), &cfg).unwrap().total;
        prop_assert_eq!(decoded.payload_bits, bits);
        prop_assert_eq!(decoded.payload_bytes as u64, bits.div_ceil(8));
        prop_assert_eq!(bits_total(&decoded.combo, store.len(), &cfg).unwrap().total, bits);
        let original = combo.deployable(&store);
        for (a, b) in decoded.store.values().iter().zip(original.values()) {
            // f16 factors and sparse values, f32 everything else.
            prop_assert!((a - b).abs() <= 1e-2 * b.abs().max(1.0), "{a} vs {b}");
        }
        prop_assert_eq!(decoded.store.segments(), store.segments());
    }

    #[test]
    fn accumulating_inference_matches_dense(
        dims in prop::collection::vec(2usize..8, 2..=4),
        joint in any::<bool>(),
        schemes in scheme_pool(),
        seed in any::<u64>(),
        x in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let model = mlp(&dims);
        let mut store = model.init(seed);
        store.set_compress_biases(joint);
        let spec = match ComboSpec::for_store(&store, schemes) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let combo = cstep(store.values(), &AdditiveCombo::new(spec), &CStepConfig::default()).unwrap().combo;
        let x = &x[..dims[0]];
        let mut counter = OpCounter::default();
        let got = compressed_forward(&combo, &store, &model, x, Some(&mut counter)).unwrap();
        let want = forward(&model, combo.deployable(&store).values(), x);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let report = MetricsReport::new(&combo, &model, &StorageConfig::default()).unwrap();
        prop_assert_eq!(counter.total().mults, report.mults);
    }
}
