//! Graph convolutions: the GCN family and the Gaussian-mixture (GMM) operator.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{AggregateMode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcnVariant {
    /// `A + I`, unit edge weights.
    Vanilla,
    /// `A + 2I`, unit edge weights.
    Improved,
    /// `A + 2I`, Euclidean edge lengths as edge weights.
    ImprovedWeighted,
}

impl GcnVariant {
    pub fn self_weight(self) -> f64 {
        match self {
            GcnVariant::Vanilla => 1.0,
            GcnVariant::Improved | GcnVariant::ImprovedWeighted => 2.0,
        }
    }

    pub fn uses_edge_lengths(self) -> bool {
        self == GcnVariant::ImprovedWeighted
    }
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

fn check_rows(op: &'static str, tape: &Tape, x: Var, g: &Graph) -> Result<()> {
    let rows = tape.shape(x).0;
    if rows != g.num_nodes() {
        return Err(Error::shape(
            op,
            format!("{rows} feature rows for a {}-node graph", g.num_nodes()),
        ));
    }
    Ok(())
}

fn add_bias(tape: &mut Tape, store: &ParamStore, out: Var, bias: Option<ParamId>) -> Result<Var> {
    match bias {
        Some(b) => {
            let rows = tape.shape(out).0;
            let bv = tape.param(store, b);
            let bb = tape.broadcast_rows(bv, rows)?;
            tape.add(out, bb)
        }
        None => Ok(out),
    }
}

/// Symmetric-normalized GCN convolution.
#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub theta: ParamId,
    pub bias: Option<ParamId>,
    pub variant: GcnVariant,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Per-edge coefficients `e_ji / sqrt(d_j d_i)` over the self-loop-augmented
/// edge list of `g` (self entries last, one per node).
pub fn gcn_edge_weights(g: &Graph, variant: GcnVariant) -> Result<Array2<f64>> {
    let s = variant.self_weight();
    let attr = g.edge_attr();
    let e: Vec<f64> = if variant.uses_edge_lengths() {
        if let Some(bad) = attr.iter().position(|&a| a < 0.0) {
            return Err(Error::Invalid(format!("negative edge weight on edge {bad}")));
        }
        attr.to_vec()
    } else {
        vec![1.0; attr.len()]
    };
    let n = g.num_nodes();
    let mut deg = vec![s; n];
    for ((_, d), &w) in g.edges().zip(&e) {
        deg[d] += w;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut w = Vec::with_capacity(e.len() + n);
    for ((src, dst), &ew) in g.edges().zip(&e) {
        w.push(ew * inv_sqrt[src] * inv_sqrt[dst]);
    }
    for i in 0..n {
        w.push(s / deg[i]);
    }
    Ok(Array2::from_shape_vec((w.len(), 1), w).expect("shape"))
}

impl GcnLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        variant: GcnVariant,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
    ) -> Self {
        let theta = store.add(format!("{name}.theta"), glorot(rng, in_channels, out_channels));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_channels))));
        GcnLayer {
            theta,
            bias,
            variant,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &Graph, x: Var) -> Result<Var> {
        check_rows("gcn_forward", tape, x, g)?;
        let w = tape.constant(gcn_edge_weights(g, self.variant)?);
        let theta = tape.param(store, self.theta);
        let h = tape.matmul(x, theta)?;
        let (edges, _) = g.self_loop_edges();
        let out = tape.neighbor_aggregate(edges, h, w, AggregateMode::Sum)?;
        add_bias(tape, store, out, self.bias)
    }
}

/// `exp(-0.5 (e - mu)^2 / variance)` for a one-dimensional pseudo-coordinate.
pub fn gmm_kernel_weight(mu: f64, variance: f64, e: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::Invalid(format!("kernel variance must be positive, got {variance}")));
    }
    Ok((-0.5 * (e - mu).powi(2) / variance).exp())
}

/// Inverse of softplus, used to initialize the raw variance parameters.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Gaussian-mixture convolution with `K` kernels over edge lengths.
///
/// Each kernel owns a weight matrix, a mean and a variance (stored as the
/// softplus pre-image so it stays positive under unconstrained updates).
#[derive(Debug, Clone)]
pub struct GmmLayer {
    pub thetas: Vec<ParamId>,
    pub mus: Vec<ParamId>,
    pub raw_variances: Vec<ParamId>,
    pub bias: Option<ParamId>,
    /// Optional per-node transform `x_i Θ_root` added outside the aggregation.
    pub root: Option<ParamId>,
    pub include_self_loops: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GmmLayer {
    /// `length_scale` seeds both the kernel means and standard deviations.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        kernels: usize,
        in_channels: usize,
        out_channels: usize,
        length_scale: f64,
        bias: bool,
    ) -> Result<Self> {
        if kernels == 0 {
            return Err(Error::Config("GMM needs at least one kernel".into()));
        }
        if !(length_scale > 0.0) {
            return Err(Error::Config(format!("length scale must be positive, got {length_scale}")));
        }
        let mut thetas = Vec::with_capacity(kernels);
        let mut mus = Vec::with_capacity(kernels);
        let mut raw_variances = Vec::with_capacity(kernels);
        for k in 0..kernels {
            thetas.push(store.add(format!("{name}.k{k}.theta"), glorot(rng, in_channels, out_channels)));
            mus.push(store.add(format!("{name}.k{k}.mu"), Array2::from_elem((1, 1), length_scale)));
            raw_variances.push(store.add(
                format!("{name}.k{k}.raw_var"),
                Array2::from_elem((1, 1), softplus_inverse(length_scale * length_scale)),
            ));
        }
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out_channels))));
        Ok(GmmLayer {
            thetas,
            mus,
            raw_variances,
            bias,
            root: None,
            include_self_loops: true,
            in_channels,
            out_channels,
        })
    }

    /// Adds a Glorot-initialized root weight.
    pub fn with_root_weight<R: Rng>(mut self, store: &mut ParamStore, rng: &mut R, name: &str) -> Self {
        self.root = Some(store.add(format!("{name}.root"), glorot(rng, self.in_channels, self.out_channels)));
        self
    }

    pub fn kernels(&self) -> usize {
        self.thetas.len()
    }

    /// Effective variance of kernel `k`.
    pub fn variance(&self, store: &ParamStore, k: usize) -> f64 {
        let raw = store.value(self.raw_variances[k])[[0, 0]];
        if raw > 30.0 {
            raw
        } else {
            raw.exp().ln_1p()
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &Graph, x: Var) -> Result<Var> {
        check_rows("gmm_forward", tape, x, g)?;
        let (edges, attr) = if self.include_self_loops {
            g.self_loop_edges()
        } else {
            (g.edge_index().clone(), g.edge_attr().clone())
        };
        let kernels = self.kernels();
        let mut acc: Option<Var> = None;
        for k in 0..kernels {
            let mu = tape.param(store, self.mus[k]);
            let raw = tape.param(store, self.raw_variances[k]);
            let var = tape.softplus(raw);
            let w = tape.gaussian(attr.clone(), mu, var)?;

            let theta = tape.param(store, self.thetas[k]);
            let h = tape.matmul(x, theta)?;
            let agg = tape.neighbor_aggregate(edges.clone(), h, w, AggregateMode::Mean)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, agg)?,
                None => agg,
            });
        }
        let mut out = acc.expect("at least one kernel");
        if kernels > 1 {
            out = tape.scalar_mul(out, 1.0 / kernels as f64);
        }
        if let Some(root) = self.root {
            let r = tape.param(store, root);
            let r = tape.matmul(x, r)?;
            out = tape.add(out, r)?;
        }
        add_bias(tape, store, out, self.bias)
    }
}

#[derive(Debug, Clone)]
pub enum Conv {
    Gcn(GcnLayer),
    Gmm(GmmLayer),
}

impl Conv {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: &Graph, x: Var) -> Result<Var> {
        match self {
            Conv::Gcn(l) => l.forward(tape, store, g, x),
            Conv::Gmm(l) => l.forward(tape, store, g, x),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Conv::Gcn(l) => l.out_channels,
            Conv::Gmm(l) => l.out_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Conv::Gcn(l) => l.in_channels,
            Conv::Gmm(l) => l.in_channels,
        }
    }
}
