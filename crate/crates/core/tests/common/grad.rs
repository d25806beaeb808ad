//! Finite-difference sweeps over layers and assembled models. Each returns
//! one `(label, max relative error)` entry per check.

use super::{connected_graph, random_graph, random_matrix};
use meshflow::autodiff::{finite_diff_check, GradCheck, ParamStore, Tape, Var};
use meshflow::conv::{GcnLayer, GcnVariant, GmmLayer};
use meshflow::model::{ModelConfig, Operator};
use meshflow::norm::{NormKind, NormLayer};
use meshflow::pool::{pooled_size, GateActivation, PoolLayer};
use meshflow::{GraphUNet, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;

pub type Checks = Vec<(String, GradCheck)>;

/// `sum(out ⊙ r)` so every output entry gets a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var, r: &Array2<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

pub fn gcn_layers() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 12, 0.3);
    let x = random_matrix(&mut rng, 12, 3);
    let r = random_matrix(&mut rng, 12, 2);
    let mut out = Vec::new();
    for variant in [GcnVariant::Vanilla, GcnVariant::Improved, GcnVariant::ImprovedWeighted] {
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut store, &mut rng, "gcn", variant, 3, 2, true);
        store.get_mut(layer.bias.unwrap()).value = random_matrix(&mut rng, 1, 2);
        let report = finite_diff_check(&store, H, |s, t| {
            let xv = t.constant(x.clone());
            let out = layer.forward(t, s, &g, xv)?;
            weighted_sum(t, out, &r)
        })
        .unwrap();
        out.push((format!("gcn {variant:?}"), report));
    }
    out
}

pub fn gmm_layers() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = connected_graph(&mut rng, 14, 0.25);
    let x = random_matrix(&mut rng, 14, 3);
    let r = random_matrix(&mut rng, 14, 2);
    let scale = g.mean_edge_length();
    let mut out = Vec::new();
    for kernels in [1, 3] {
        for (self_loops, root) in [(true, false), (false, false), (true, true)] {
            let mut store = ParamStore::new();
            let mut layer = GmmLayer::new(&mut store, &mut rng, "gmm", kernels, 3, 2, scale, true).unwrap();
            layer.include_self_loops = self_loops;
            if root {
                layer = layer.with_root_weight(&mut store, &mut rng, "gmm");
            }
            for k in 0..kernels {
                store.get_mut(layer.mus[k]).value[[0, 0]] = scale * (0.5 + k as f64 * 0.4);
            }
            let report = finite_diff_check(&store, H, |s, t| {
                let xv = t.constant(x.clone());
                let out = layer.forward(t, s, &g, xv)?;
                weighted_sum(t, out, &r)
            })
            .unwrap();
            out.push((format!("gmm K={kernels} self={self_loops} root={root}"), report));
        }
    }
    out
}

pub fn pool_layers() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(&mut rng, 15, 0.3);
    let x = random_matrix(&mut rng, 15, 4);
    let mut out = Vec::new();
    for gate in [GateActivation::Tanh, GateActivation::Sigmoid] {
        for ratio in [0.4, 0.6, 1.0] {
            let mut store = ParamStore::new();
            let mut layer = PoolLayer::new(&mut store, &mut rng, "pool", 4, ratio).unwrap();
            layer.gate = gate;
            let r = random_matrix(&mut rng, pooled_size(ratio, 15), 4);
            let report = finite_diff_check(&store, H, |s, t| {
                let xv = t.constant(x.clone());
                let pooled = layer.forward(t, s, &g, xv)?;
                weighted_sum(t, pooled.x, &r)
            })
            .unwrap();
            out.push((format!("gpool {gate:?} ratio {ratio}"), report));
        }
    }
    out
}

pub fn norm_layers() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    for kind in [NormKind::Layer, NormKind::Graph] {
        let mut store = ParamStore::new();
        let norm = NormLayer::new(&mut store, "norm", kind, 4);
        // gradients w.r.t. the input too: feed it through a parameter
        let xid = store.add("x", random_matrix(&mut rng, 9, 4) * 2.0);
        store.get_mut(norm.gamma.unwrap()).value = random_matrix(&mut rng, 1, 4);
        store.get_mut(norm.beta.unwrap()).value = random_matrix(&mut rng, 1, 4);
        if let Some(a) = norm.alpha {
            store.get_mut(a).value = random_matrix(&mut rng, 1, 4);
        }
        let r = random_matrix(&mut rng, 9, 4);
        let report = finite_diff_check(&store, H, |s, t| {
            let xv = t.param(s, xid);
            let out = norm.forward(t, s, xv)?;
            weighted_sum(t, out, &r)
        })
        .unwrap();
        out.push((format!("{kind:?}"), report));
    }
    out
}

fn model_check(cfg: ModelConfig, nodes: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = connected_graph(&mut rng, nodes, 0.2);
    let mut model = GraphUNet::build(ModelConfig {
        length_scale: Some(g.mean_edge_length()),
        ..cfg
    })
    .unwrap();
    // move off the initialization: with alpha = 1 and beta = 0 some biases
    // cancel exactly and their zero gradients only measure round-off
    for p in model.store.iter_mut() {
        p.value.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    let window = random_matrix(&mut rng, nodes, model.window());
    let target = random_matrix(&mut rng, nodes, 1);
    finite_diff_check(&model.store, H, |s, t| {
        let w = t.constant(window.clone());
        let (out, _) = model.forward_with_store(t, s, &g, w)?;
        t.mse(out, &target)
    })
    .unwrap()
}

/// Every operator and norm, with and without pooling, on 24-node graphs.
pub fn small_models() -> Checks {
    let operators = [Operator::GcnVanilla, Operator::GcnImproved, Operator::GcnImprovedWeighted, Operator::Gmm];
    let mut seed = 10;
    let mut out = Vec::new();
    for operator in operators {
        for norm in [NormKind::Layer, NormKind::Graph, NormKind::None] {
            for pooling_ratio in [Some(0.6), None] {
                seed += 1;
                let cfg = ModelConfig {
                    operator,
                    kernels: if operator == Operator::Gmm { 2 } else { 1 },
                    // a two-channel layer norm is nearly a sign function at
                    // eps = 1e-5, which defeats a 1e-5 central difference
                    encoder_channels: vec![6, 5, 4, 3, 1],
                    pooling_ratio,
                    norm,
                    seed,
                    ..ModelConfig::default()
                };
                out.push((format!("{operator} {norm:?} {pooling_ratio:?}"), model_check(cfg, 24, seed)));
            }
        }
    }
    out
}

/// The default single-mesh and inductive channel schedules on 30-node graphs.
pub fn full_models() -> Checks {
    [(ModelConfig::single_mesh(), 40, "single-mesh"), (ModelConfig::inductive(), 41, "inductive")]
        .into_iter()
        .map(|(cfg, seed, label)| (label.to_string(), model_check(ModelConfig { seed, ..cfg }, 30, seed)))
        .collect()
}

/// Labels of checks that exceed `tol` (or checked nothing).
pub fn failures(checks: &Checks, tol: f64) -> Vec<String> {
    checks
        .iter()
        .filter(|(_, r)| r.checked == 0 || !(r.max_rel_error < tol))
        .map(|(label, r)| format!("{label}: {:e} at {:?}", r.max_rel_error, r.worst))
        .collect()
}

pub fn worst(checks: &Checks) -> f64 {
    checks.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
}
