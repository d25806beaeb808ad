//! Per-node layer normalization and per-feature graph normalization.

use ndarray::Array2;

use crate::autodiff::{ParamId, ParamStore, ReduceAxis, Reduction, Tape, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Layer,
    Graph,
    None,
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub kind: NormKind,
    pub channels: usize,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub alpha: Option<ParamId>,
    pub eps: f64,
}

impl NormLayer {
    pub fn new(store: &mut ParamStore, name: &str, kind: NormKind, channels: usize) -> Self {
        let (gamma, beta, alpha) = match kind {
            NormKind::None => (None, None, None),
            NormKind::Layer | NormKind::Graph => {
                let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, channels)));
                let beta = store.add(format!("{name}.beta"), Array2::zeros((1, channels)));
                let alpha = (kind == NormKind::Graph)
                    .then(|| store.add(format!("{name}.alpha"), Array2::ones((1, channels))));
                (Some(gamma), Some(beta), alpha)
            }
        };
        NormLayer {
            kind,
            channels,
            gamma,
            beta,
            alpha,
            eps: NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (n, f) = tape.shape(x);
        if self.kind != NormKind::None && f != self.channels {
            return Err(Error::shape(
                "norm",
                format!("{f} channels for a {}-channel layer", self.channels),
            ));
        }
        let xhat = match self.kind {
            NormKind::None => return Ok(x),
            NormKind::Layer => {
                let mu = tape.reduce(x, Reduction::Mean, ReduceAxis::Cols);
                let mu = tape.broadcast_cols(mu, f)?;
                let centered = tape.sub(x, mu)?;
                let sq = tape.square(centered);
                let var = tape.reduce(sq, Reduction::Mean, ReduceAxis::Cols);
                let var = tape.add_scalar(var, self.eps);
                let inv = tape.powf(var, -0.5);
                let inv = tape.broadcast_cols(inv, f)?;
                tape.mul(centered, inv)?
            }
            NormKind::Graph => {
                let mu = tape.reduce(x, Reduction::Mean, ReduceAxis::Rows);
                let alpha = tape.param(store, self.alpha.expect("graph norm has alpha"));
                let shift = tape.mul(alpha, mu)?;
                let shift = tape.broadcast_rows(shift, n)?;
                let centered = tape.sub(x, shift)?;
                let sq = tape.square(centered);
                let var = tape.reduce(sq, Reduction::Mean, ReduceAxis::Rows);
                let var = tape.add_scalar(var, self.eps);
                let inv = tape.powf(var, -0.5);
                let inv = tape.broadcast_rows(inv, n)?;
                tape.mul(centered, inv)?
            }
        };
        let gamma = tape.param(store, self.gamma.expect("affine"));
        let gamma = tape.broadcast_rows(gamma, n)?;
        let beta = tape.param(store, self.beta.expect("affine"));
        let beta = tape.broadcast_rows(beta, n)?;
        let scaled = tape.mul(xhat, gamma)?;
        tape.add(scaled, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use ndarray::array;

    fn apply(layer: &NormLayer, store: &ParamStore, x: Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = layer.forward(&mut tape, store, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut store = ParamStore::new();
        let ln = NormLayer::new(&mut store, "ln", NormKind::Layer, 3);
        let out = apply(&ln, &store, array![[2.5, 2.5, 2.5]]);
        assert_eq!(out, array![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn layer_norm_two_features() {
        let mut store = ParamStore::new();
        let mut ln = NormLayer::new(&mut store, "ln", NormKind::Layer, 2);
        ln.eps = 0.0;
        assert_eq!(apply(&ln, &store, array![[1.0, 3.0]]), array![[-1.0, 1.0]]);
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut store = ParamStore::new();
        let ln = NormLayer::new(&mut store, "ln", NormKind::Layer, 2);
        store.get_mut(ln.gamma.unwrap()).value.fill(0.0);
        store.get_mut(ln.beta.unwrap()).value = array![[0.7, 0.7]];
        let out = apply(&ln, &store, array![[1.0, 9.0], [-4.0, 2.0]]);
        assert!(out.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn graph_norm_examples() {
        let mut store = ParamStore::new();
        let mut gn = NormLayer::new(&mut store, "gn", NormKind::Graph, 1);
        gn.eps = 0.0;
        assert_eq!(apply(&gn, &store, array![[1.0], [3.0]]), array![[-1.0], [1.0]]);

        store.get_mut(gn.alpha.unwrap()).value.fill(0.0);
        let out = apply(&gn, &store, array![[1.0], [3.0]]);
        let r5 = 5f64.sqrt();
        assert!((out[[0, 0]] - 1.0 / r5).abs() < 1e-15);
        assert!((out[[1, 0]] - 3.0 / r5).abs() < 1e-15);
    }

    #[test]
    fn graph_norm_single_node_gives_beta() {
        let mut store = ParamStore::new();
        let gn = NormLayer::new(&mut store, "gn", NormKind::Graph, 2);
        store.get_mut(gn.beta.unwrap()).value = array![[0.25, -1.0]];
        assert_eq!(apply(&gn, &store, array![[4.0, -3.0]]), array![[0.25, -1.0]]);
    }

    #[test]
    fn none_is_identity() {
        let mut store = ParamStore::new();
        let id = NormLayer::new(&mut store, "n", NormKind::None, 2);
        assert!(store.is_empty());
        let x = array![[1.0, -2.0], [3.5, 0.0]];
        assert_eq!(apply(&id, &store, x.clone()), x);
    }

    #[test]
    fn gradients_through_affine_and_alpha() {
        let x = array![[0.3, -1.0, 2.0], [1.5, 0.2, -0.7], [0.0, 0.9, 1.1], [-2.0, 0.4, 0.6]];
        let w = x.mapv(|v: f64| (3.0 * v).cos());
        for kind in [NormKind::Layer, NormKind::Graph] {
            let mut store = ParamStore::new();
            let layer = NormLayer::new(&mut store, "n", kind, 3);
            for p in store.iter_mut() {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64 - 0.05);
            }
            let xid = store.add("x", x.clone());
            let report = finite_diff_check(&store, 1e-5, |s, t| {
                let xv = t.param(s, xid);
                let out = layer.forward(t, s, xv)?;
                let wv = t.constant(w.clone());
                let p = t.mul(out, wv)?;
                Ok(t.sum(p))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{kind:?}: {report:?}");
        }
    }
}
