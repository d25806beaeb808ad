//! Randomized invariants: pooling structure, equivariance, normalization
//! statistics and byte-stable file formats.

mod common;

use common::*;
use meshflow::autodiff::{ParamStore, Tape};
use meshflow::conv::{GcnLayer, GcnVariant, GmmLayer};
use meshflow::formats;
use meshflow::model::{ModelConfig, Operator};
use meshflow::norm::{NormKind, NormLayer};
use meshflow::pool::{gunpool, pooled_size, top_k, PoolLayer};
use meshflow::{build_graph, rollout_mse, Graph, GraphUNet, SnapshotSeries};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relabels node `i` as `perm[i]`.
fn permute_graph(g: &Graph, perm: &[usize]) -> Graph {
    let n = g.num_nodes();
    let mut coords = vec![[0.0; 2]; n];
    for i in 0..n {
        coords[perm[i]] = g.coords()[i];
    }
    let edges: Vec<_> = g.undirected_edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    build_graph(coords, &edges).unwrap()
}

fn permute_rows(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        out.row_mut(perm[i]).assign(&x.row(i));
    }
    out
}

fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_size_is_exact_ceiling(num in 1usize..=20, n in 1usize..500) {
        let ratio = num as f64 / 20.0;
        let k = pooled_size(ratio, n);
        prop_assert_eq!(k, (num * n).div_ceil(20).max(1));
        prop_assert!(k >= 1 && k <= n);
    }

    #[test]
    fn top_k_orders_by_score_then_index(scores in prop::collection::vec(-3i32..3, 1..30), k in 1usize..30) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let idx = top_k(&scores, k);
        prop_assert_eq!(idx.len(), k.min(scores.len()));
        for w in idx.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        // nothing left out beats the last selected node
        if let Some(&last) = idx.last() {
            for i in 0..scores.len() {
                if !idx.contains(&i) {
                    prop_assert!(scores[i] < scores[last] || (scores[i] == scores[last] && i > last));
                }
            }
        }
    }

    #[test]
    fn unpool_after_pool_restores_structure(seed in any::<u64>(), n in 1usize..40, ratio_idx in 0usize..5) {
        let ratio = [0.2, 0.4, 0.6, 0.8, 1.0][ratio_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.2);
        let f = rng.random_range(1..5);
        let x = random_matrix(&mut rng, n, f);
        let mut store = ParamStore::new();
        let layer = PoolLayer::new(&mut store, &mut rng, "p", f, ratio).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pooled = layer.forward(&mut tape, &store, &g, xv).unwrap();
        let kept = pooled.record.idx_saved.clone();
        prop_assert_eq!(kept.len(), pooled_size(ratio, n));
        let (restored, up) = gunpool(&mut tape, &pooled.record, pooled.x).unwrap();
        prop_assert!(restored == g);
        prop_assert_eq!(restored.coords(), g.coords());
        let up = tape.value(up);
        let xp = tape.value(pooled.x);
        for i in 0..n {
            match kept.iter().position(|&k| k == i) {
                Some(r) => prop_assert_eq!(up.row(i), xp.row(r)),
                None => prop_assert!(up.row(i).iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn pool_selection_ignores_projection_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 20, 0.2);
        let x = random_matrix(&mut rng, 20, 3);
        let mut store = ParamStore::new();
        let layer = PoolLayer::new(&mut store, &mut rng, "p", 3, 0.6).unwrap();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let p = layer.forward(&mut tape, store, &g, xv).unwrap();
            (p.record.idx_saved.clone(), tape.value(p.x).clone(), p.graph)
        };
        let (i1, x1, g1) = run(&store);
        store.get_mut(layer.p).value *= scale;
        let (i2, x2, g2) = run(&store);
        prop_assert_eq!(i1, i2);
        prop_assert!(max_abs_diff(&x1, &x2) < 1e-12);
        prop_assert!(g1 == g2);
    }

    #[test]
    fn convolutions_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = connected_graph(&mut rng, n, 0.2);
        let perm = random_perm(&mut rng, n);
        let gp = permute_graph(&g, &perm);
        let x = random_matrix(&mut rng, n, 3);
        let xp = permute_rows(&x, &perm);
        let mut store = ParamStore::new();
        let gcn = GcnLayer::new(&mut store, &mut rng, "gcn", GcnVariant::ImprovedWeighted, 3, 2, true);
        let gmm = GmmLayer::new(&mut store, &mut rng, "gmm", 2, 3, 2, 0.2, true)
            .unwrap()
            .with_root_weight(&mut store, &mut rng, "gmm");
        for layer in [meshflow::conv::Conv::Gcn(gcn), meshflow::conv::Conv::Gmm(gmm)] {
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let b = tape.constant(xp.clone());
            let ya = layer.forward(&mut tape, &store, &g, a).unwrap();
            let yb = layer.forward(&mut tape, &store, &gp, b).unwrap();
            let want = permute_rows(tape.value(ya), &perm);
            prop_assert!(max_abs_diff(&want, tape.value(yb)) < 1e-12);
        }
    }

    #[test]
    fn unpooled_unet_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..30, op in 0usize..4) {
        let operator = [Operator::Gmm, Operator::GcnVanilla, Operator::GcnImproved, Operator::GcnImprovedWeighted][op];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = connected_graph(&mut rng, n, 0.2);
        let perm = random_perm(&mut rng, n);
        let gp = permute_graph(&g, &perm);
        let model = GraphUNet::build(ModelConfig {
            operator,
            encoder_channels: vec![6, 5, 4, 3, 1],
            pooling_ratio: None,
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let w = random_matrix(&mut rng, n, 6);
        let a = model.predict(&g, &w).unwrap();
        let b = model.predict(&gp, &permute_rows(&w, &perm)).unwrap();
        prop_assert!(max_abs_diff(&permute_rows(&a, &perm), &b) < 1e-10);
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in any::<u64>(), n in 1usize..20, f in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, n, f) * 5.0;
        let mut store = ParamStore::new();
        let ln = NormLayer::new(&mut store, "ln", NormKind::Layer, f);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = ln.forward(&mut tape, &store, xv).unwrap();
        let out = tape.value(out);
        for i in 0..n {
            let row = x.row(i);
            let mu = row.mean().unwrap();
            let var = row.mapv(|v| (v - mu).powi(2)).mean().unwrap();
            let o = out.row(i);
            let om = o.mean().unwrap();
            let ov = o.mapv(|v| (v - om).powi(2)).mean().unwrap();
            prop_assert!(om.abs() <= 1e-10);
            prop_assert!((ov - var / (var + ln.eps)).abs() <= 1e-6);
        }
    }

    #[test]
    fn graph_norm_columns_are_centered(seed in any::<u64>(), n in 1usize..20, f in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_matrix(&mut rng, n, f) * 5.0 + 2.0;
        let mut store = ParamStore::new();
        let gn = NormLayer::new(&mut store, "gn", NormKind::Graph, f);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = gn.forward(&mut tape, &store, xv).unwrap();
        for col in tape.value(out).columns() {
            prop_assert!(col.mean().unwrap().abs() <= 1e-10);
        }
    }

    #[test]
    fn mesh_files_round_trip_byte_identically(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.15);
        let mut first = Vec::new();
        formats::write_mesh(&mut first, &g).unwrap();
        let back = formats::read_mesh(&first[..]).unwrap();
        prop_assert!(back == g);
        let mut second = Vec::new();
        formats::write_mesh(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn series_files_round_trip_byte_identically(seed in any::<u64>(), t in 2usize..20, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // mix of awkward magnitudes, including exact zeros and negative zero
        let fields = Array2::from_shape_fn((t, n), |_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => -0.0,
            2 => rng.random_range(-1e-300..1e-300),
            _ => rng.random_range(-1e6..1e6),
        });
        let s = SnapshotSeries::new(format!("mesh-{seed}"), 0.01, fields).unwrap();
        let mut first = Vec::new();
        formats::write_series(&mut first, &s).unwrap();
        let back = formats::read_series(&first[..]).unwrap();
        prop_assert_eq!(back.fields.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.fields.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut second = Vec::new();
        formats::write_series(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn rollout_mse_of_identical_fields_is_zero(seed in any::<u64>(), t in 1usize..10, n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, t, n);
        prop_assert_eq!(rollout_mse(&a, &a).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip_byte_identically(seed in any::<u64>(), op in 0usize..4, pool in any::<bool>()) {
        let operator = [Operator::Gmm, Operator::GcnVanilla, Operator::GcnImproved, Operator::GcnImprovedWeighted][op];
        let model = GraphUNet::build(ModelConfig {
            operator,
            kernels: 2,
            pooling_ratio: pool.then_some(0.6),
            length_scale: Some(0.031),
            seed,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut first = Vec::new();
        formats::write_model(&mut first, &model).unwrap();
        let back = formats::read_model(&mut &first[..]).unwrap();
        prop_assert_eq!(&back.store, &model.store);
        prop_assert_eq!(&back.config, &model.config);
        let mut second = Vec::new();
        formats::write_model(&mut second, &back).unwrap();
        prop_assert_eq!(first, second);
    }
}
