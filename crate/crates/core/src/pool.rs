//! Trainable top-k graph pooling and its index-restoring inverse.

use std::cmp::Ordering;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Activation applied to the selected projection scores before gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateActivation {
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct PoolLayer {
    /// `F x 1` projection vector.
    pub p: ParamId,
    pub ratio: f64,
    pub use_power2_adjacency: bool,
    pub gate: GateActivation,
}

/// Everything unpooling needs to restore the pre-pool level.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    pub n_saved: usize,
    /// Selected pre-pool indices, best score first.
    pub idx_saved: Arc<Vec<usize>>,
    /// Pre-pool graph: adjacency, edge attributes and coordinates.
    pub graph_saved: Graph,
}

impl PoolRecord {
    pub fn len(&self) -> usize {
        self.idx_saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx_saved.is_empty()
    }
}

pub struct Pooled {
    pub graph: Graph,
    pub x: Var,
    pub record: PoolRecord,
}

/// Number of nodes kept out of `n`: `ceil(ratio * n)`, at least 1.
///
/// The product is nudged down by a relative 1e-12 before rounding up so
/// that ratios like 0.6 or 2/3 do not pick up a spurious extra node from
/// binary rounding.
pub fn pooled_size(ratio: f64, n: usize) -> usize {
    let prod = ratio * n as f64;
    ((prod - prod.abs() * 1e-12).ceil() as usize).clamp(1, n.max(1))
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

impl PoolLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("pooling ratio must lie in (0, 1], got {ratio}")));
        }
        let limit = (6.0 / (channels + 1) as f64).sqrt();
        let p = Array2::from_shape_fn((channels, 1), |_| rng.random_range(-limit..limit));
        Ok(PoolLayer {
            p: store.add(format!("{name}.p"), p),
            ratio,
            use_power2_adjacency: false,
            gate: GateActivation::Tanh,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &Graph, x: Var) -> Result<Pooled> {
        let (n, f) = tape.shape(x);
        if n == 0 {
            return Err(Error::Invalid("cannot pool an empty graph".into()));
        }
        if n != g.num_nodes() {
            return Err(Error::shape("gpool", format!("{n} rows for a {}-node graph", g.num_nodes())));
        }
        let p_val = store.value(self.p);
        if p_val.dim() != (f, 1) {
            return Err(Error::shape("gpool", format!("projection {:?} for {f} features", p_val.dim())));
        }
        if p_val.iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid("projection vector has zero norm".into()));
        }

        let p = tape.param(store, self.p);
        let proj = tape.matmul(x, p)?;
        let p_sq = tape.square(p);
        let norm_sq = tape.sum(p_sq);
        let inv_norm = tape.powf(norm_sq, -0.5);
        let inv_norm = tape.broadcast_rows(inv_norm, n)?;
        let y = tape.mul(proj, inv_norm)?;

        let scores: Vec<f64> = tape.value(y).column(0).to_vec();
        let idx = Arc::new(top_k(&scores, pooled_size(self.ratio, n)));

        let y_sel = tape.row_gather(y, idx.clone())?;
        let gate = match self.gate {
            GateActivation::Tanh => tape.tanh(y_sel),
            GateActivation::Sigmoid => {
                // sigmoid(z) = (1 + tanh(z / 2)) / 2
                let half = tape.scalar_mul(y_sel, 0.5);
                let t = tape.tanh(half);
                let t = tape.add_scalar(t, 1.0);
                tape.scalar_mul(t, 0.5)
            }
        };
        let gate = tape.broadcast_cols(gate, f)?;
        let x_sel = tape.row_gather(x, idx.clone())?;
        let x_out = tape.mul(x_sel, gate)?;

        let coarse = if self.use_power2_adjacency {
            g.with_directed_edges(&g.two_hop_pairs()).select_nodes(&idx)
        } else {
            g.select_nodes(&idx)
        };
        Ok(Pooled {
            graph: coarse,
            x: x_out,
            record: PoolRecord {
                n_saved: n,
                idx_saved: idx,
                graph_saved: g.clone(),
            },
        })
    }
}

/// Restores the pre-pool graph; unselected rows are zero.
pub fn gunpool(tape: &mut Tape, record: &PoolRecord, x: Var) -> Result<(Graph, Var)> {
    let rows = tape.shape(x).0;
    if rows != record.len() {
        return Err(Error::shape(
            "gunpool",
            format!("{rows} rows for a record of {} nodes", record.len()),
        ));
    }
    let out = tape.row_scatter_add(x, record.idx_saved.clone(), record.n_saved)?;
    Ok((record.graph_saved.clone(), out))
}
