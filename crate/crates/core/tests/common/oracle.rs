//! Independent dense/loop reference implementations and the sweeps that compare
//! the library against them. Each sweep returns its largest deviation.

use super::{connected_graph, dense_adjacency, dist, max_abs_diff, random_graph, random_matrix};
use meshflow::autodiff::{ParamStore, Tape};
use meshflow::conv::{GcnLayer, GcnVariant, GmmLayer};
use meshflow::norm::{NormKind, NormLayer};
use meshflow::pool::{gunpool, PoolLayer};
use meshflow::Graph;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dense_gcn(g: &Graph, x: &Array2<f64>, theta: &Array2<f64>, variant: GcnVariant) -> Array2<f64> {
    let n = g.num_nodes();
    let s = variant.self_weight();
    let mut a_hat = dense_adjacency(g, variant.uses_edge_lengths());
    for i in 0..n {
        a_hat[[i, i]] += s;
    }
    let d: Array1<f64> = a_hat.sum_axis(ndarray::Axis(0));
    let d_inv_sqrt = Array2::from_diag(&d.mapv(|v| 1.0 / v.sqrt()));
    d_inv_sqrt.dot(&a_hat).dot(&d_inv_sqrt).dot(x).dot(theta)
}

#[allow(clippy::too_many_arguments)]
pub fn dense_gmm(
    g: &Graph,
    x: &Array2<f64>,
    thetas: &[Array2<f64>],
    mus: &[f64],
    vars: &[f64],
    self_loops: bool,
    root: Option<&Array2<f64>>,
    bias: Option<&Array2<f64>>,
) -> Array2<f64> {
    let n = g.num_nodes();
    let k = thetas.len();
    let fout = thetas[0].ncols();
    let mut out = Array2::zeros((n, fout));
    for i in 0..n {
        let mut nbrs: Vec<(usize, f64)> = g
            .neighbors(i)
            .iter()
            .map(|&j| (j, dist(g.coords()[i], g.coords()[j])))
            .collect();
        if self_loops {
            nbrs.push((i, 0.0));
        }
        for &(j, e) in &nbrs {
            for kk in 0..k {
                let w = (-0.5 * (e - mus[kk]).powi(2) / vars[kk]).exp();
                let contrib = x.row(j).dot(&thetas[kk]) * (w / (k as f64 * nbrs.len() as f64));
                let mut row = out.row_mut(i);
                row += &contrib;
            }
        }
        if let Some(r) = root {
            let mut row = out.row_mut(i);
            row += &x.row(i).dot(r);
        }
        if let Some(b) = bias {
            let mut row = out.row_mut(i);
            row += &b.row(0);
        }
    }
    out
}

/// Top-k pooling written out step by step, independent of the library's selection code.
pub struct RefPool {
    pub idx: Vec<usize>,
    pub x_out: Array2<f64>,
    pub coords: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize, f64)>,
}

pub fn ref_gpool(g: &Graph, x: &Array2<f64>, p: &[f64], keep: usize) -> RefPool {
    let n = g.num_nodes();
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| (0..p.len()).map(|f| x[[i, f]] * p[f]).sum::<f64>() / norm)
        .collect();
    // repeatedly take the best remaining node; ties go to the lower index
    let mut taken = vec![false; n];
    let mut idx = Vec::new();
    for _ in 0..keep {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if y[i] > y[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        idx.push(b);
    }
    let mut x_out = Array2::zeros((keep, x.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        let gate = y[i].tanh();
        for f in 0..x.ncols() {
            x_out[[r, f]] = x[[i, f]] * gate;
        }
    }
    let coords: Vec<[f64; 2]> = idx.iter().map(|&i| g.coords()[i]).collect();
    let mut edges = Vec::new();
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            if a != b && g.has_edge(ia, ib) {
                edges.push((a, b, dist(coords[a], coords[b])));
            }
        }
    }
    edges.sort_by(|l, r| (l.0, l.1).cmp(&(r.0, r.1)));
    RefPool {
        idx,
        x_out,
        coords,
        edges,
    }
}

/// `ceil(num * n / den)` in exact integer arithmetic, at least 1.
pub fn exact_keep(num: usize, den: usize, n: usize) -> usize {
    (num * n).div_ceil(den).max(1)
}

pub fn apply_norm(layer: &NormLayer, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, store, xv).unwrap();
    tape.value(out).clone()
}

/// GCN layers (all variants) against the dense normalized-adjacency product over 100 random graphs.
pub fn gcn_sweep() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=8);
        let g = random_graph(&mut rng, n, 0.45);
        let (fin, fout) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = random_matrix(&mut rng, n, fin);
        for variant in [GcnVariant::Vanilla, GcnVariant::Improved, GcnVariant::ImprovedWeighted] {
            let mut store = ParamStore::new();
            let layer = GcnLayer::new(&mut store, &mut rng, "gcn", variant, fin, fout, false);
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = layer.forward(&mut tape, &store, &g, xv).unwrap();
            let want = dense_gcn(&g, &x, store.value(layer.theta), variant);
            worst = worst.max(max_abs_diff(tape.value(out), &want));
        }
    }
    worst
}

/// GMM layers (K = 1 and 3, with and without self-loops, root weight and bias) against the per-node loop.
pub fn gmm_sweep() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=8);
        let g = connected_graph(&mut rng, n, 0.3);
        let (fin, fout) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = random_matrix(&mut rng, n, fin);
        for kernels in [1, 3] {
            for (self_loops, root, bias) in [(true, false, false), (false, false, true), (true, true, true)] {
                let mut store = ParamStore::new();
                let mut layer = GmmLayer::new(&mut store, &mut rng, "gmm", kernels, fin, fout, 0.3, bias).unwrap();
                layer.include_self_loops = self_loops;
                if root {
                    layer = layer.with_root_weight(&mut store, &mut rng, "gmm");
                }
                // move the kernels off their shared initialization
                for k in 0..kernels {
                    store.get_mut(layer.mus[k]).value[[0, 0]] = rng.random_range(0.0..0.8);
                    store.get_mut(layer.raw_variances[k]).value[[0, 0]] = rng.random_range(-2.0..1.0);
                }
                if let Some(b) = layer.bias {
                    store.get_mut(b).value = random_matrix(&mut rng, 1, fout);
                }
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let out = layer.forward(&mut tape, &store, &g, xv).unwrap();

                let thetas: Vec<_> = layer.thetas.iter().map(|&t| store.value(t).clone()).collect();
                let mus: Vec<_> = layer.mus.iter().map(|&m| store.value(m)[[0, 0]]).collect();
                let vars: Vec<_> = (0..kernels).map(|k| layer.variance(&store, k)).collect();
                let want = dense_gmm(
                    &g,
                    &x,
                    &thetas,
                    &mus,
                    &vars,
                    self_loops,
                    layer.root.map(|r| store.value(r)),
                    layer.bias.map(|b| store.value(b)),
                );
                worst = worst.max(max_abs_diff(tape.value(out), &want));
            }
        }
    }
    worst
}

/// gpool and gunpool against [`ref_gpool`] over 100 graphs and seven ratios.
/// A structural mismatch (selection, coordinates, edges) counts as an infinite deviation.
pub fn pool_sweep() -> f64 {
    let ratios = [(1, 5), (2, 5), (1, 2), (3, 5), (2, 3), (4, 5), (1, 1)];
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let n = rng.random_range(1..=8);
        let g = random_graph(&mut rng, n, 0.5);
        let f = rng.random_range(1..4);
        let x = random_matrix(&mut rng, n, f);
        for &(num, den) in &ratios {
            let ratio = num as f64 / den as f64;
            let mut store = ParamStore::new();
            let layer = PoolLayer::new(&mut store, &mut rng, "pool", f, ratio).unwrap();
            let p: Vec<f64> = store.value(layer.p).iter().copied().collect();
            let want = ref_gpool(&g, &x, &p, exact_keep(num, den, n));

            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pooled = layer.forward(&mut tape, &store, &g, xv).unwrap();
            let got: Vec<(usize, usize, f64)> = pooled
                .graph
                .edges()
                .zip(pooled.graph.edge_attr().iter())
                .map(|((s, d), &a)| (s, d, a))
                .collect();
            let same_structure = *pooled.record.idx_saved == want.idx
                && pooled.graph.coords() == &want.coords[..]
                && got.len() == want.edges.len()
                && got.iter().zip(&want.edges).all(|(a, b)| (a.0, a.1) == (b.0, b.1));
            if !same_structure {
                return f64::INFINITY;
            }
            worst = worst.max(max_abs_diff(tape.value(pooled.x), &want.x_out));
            for (a, b) in got.iter().zip(&want.edges) {
                worst = worst.max((a.2 - b.2).abs());
            }

            // unpool: zeros everywhere, then the pooled rows scattered back
            let (restored, up) = gunpool(&mut tape, &pooled.record, pooled.x).unwrap();
            if restored != g {
                return f64::INFINITY;
            }
            let mut expect = Array2::zeros((n, f));
            for (r, &i) in want.idx.iter().enumerate() {
                expect.row_mut(i).assign(&want.x_out.row(r));
            }
            worst = worst.max(max_abs_diff(tape.value(up), &expect));
        }
    }
    worst
}

/// LayerNorm against the per-row formula over 100 random inputs and affine parameters.
pub fn layer_norm_sweep() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (n, f) = (rng.random_range(1..=8), rng.random_range(1..6));
        let x = random_matrix(&mut rng, n, f) * 3.0;
        let mut store = ParamStore::new();
        let ln = NormLayer::new(&mut store, "ln", NormKind::Layer, f);
        let gamma = random_matrix(&mut rng, 1, f);
        let beta = random_matrix(&mut rng, 1, f);
        store.get_mut(ln.gamma.unwrap()).value = gamma.clone();
        store.get_mut(ln.beta.unwrap()).value = beta.clone();
        let got = apply_norm(&ln, &store, &x);
        for i in 0..n {
            let row: Vec<f64> = x.row(i).to_vec();
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / f as f64;
            for j in 0..f {
                let want = gamma[[0, j]] * (row[j] - mu) / (var + ln.eps).sqrt() + beta[[0, j]];
                worst = worst.max((got[[i, j]] - want).abs());
            }
        }
    }
    worst
}

/// GraphNorm against the per-column formula over 100 random inputs and parameters.
pub fn graph_norm_sweep() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (n, f) = (rng.random_range(1..=8), rng.random_range(1..6));
        let x = random_matrix(&mut rng, n, f) * 3.0;
        let mut store = ParamStore::new();
        let gn = NormLayer::new(&mut store, "gn", NormKind::Graph, f);
        let gamma = random_matrix(&mut rng, 1, f);
        let beta = random_matrix(&mut rng, 1, f);
        let alpha = random_matrix(&mut rng, 1, f);
        store.get_mut(gn.gamma.unwrap()).value = gamma.clone();
        store.get_mut(gn.beta.unwrap()).value = beta.clone();
        store.get_mut(gn.alpha.unwrap()).value = alpha.clone();
        let got = apply_norm(&gn, &store, &x);
        for j in 0..f {
            let col: Vec<f64> = x.column(j).to_vec();
            let mu = col.iter().sum::<f64>() / n as f64;
            let shift = alpha[[0, j]] * mu;
            let var = col.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n as f64;
            for i in 0..n {
                let want = gamma[[0, j]] * (col[i] - shift) / (var + gn.eps).sqrt() + beta[[0, j]];
                worst = worst.max((got[[i, j]] - want).abs());
            }
        }
    }
    worst
}
