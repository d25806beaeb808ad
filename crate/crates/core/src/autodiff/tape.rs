//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every intermediate [`Var`] in creation order, which is
//! a topological order of the computation, so the backward sweep simply walks
//! the record in reverse.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::EdgeIndex;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Which dimension a reduction collapses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Collapse rows: `R x C -> 1 x C`.
    Rows,
    /// Collapse columns: `R x C -> R x 1`.
    Cols,
    /// `R x C -> 1 x 1`.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Sum,
    /// Divide by the number of incoming edges of the destination node.
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Exp(Var),
    Tanh(Var),
    Elu(Var),
    Softplus(Var),
    RowGather(Var, Arc<Vec<usize>>),
    RowScatter(Var, Arc<Vec<usize>>),
    Aggregate {
        x: Var,
        weights: Var,
        edges: Arc<EdgeIndex>,
        inv_count: Option<Vec<f64>>,
    },
    Reduce(Var, Reduction, ReduceAxis),
    BroadcastRows(Var),
    BroadcastCols(Var),
    ConcatCols(Var, Var),
    Gaussian {
        points: Arc<Vec<f64>>,
        mu: Var,
        var: Var,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed like the parameter store.
pub type ParamGrads = Vec<Option<Array2<f64>>>;

fn check_same(op: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A constant leaf. Gradients are computed for it but never reported.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    /// Elementwise `a^p`; the caller keeps the base in the domain of `p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).mapv(|x| x.powf(p));
        self.push(out, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Powf(a, 2.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(elu);
        self.push(out, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `exp(-(p - mu)^2 / (2 var))` for every point, as an `n x 1` column;
    /// `mu` and `var` are `1 x 1`.
    pub fn gaussian(&mut self, points: Arc<Vec<f64>>, mu: Var, var: Var) -> Result<Var> {
        let (vm, vv) = (self.value(mu), self.value(var));
        if vm.dim() != (1, 1) || vv.dim() != (1, 1) {
            return Err(Error::shape(
                "gaussian",
                format!("mean {:?} and variance {:?} must be 1x1", vm.dim(), vv.dim()),
            ));
        }
        let (m, v) = (vm[[0, 0]], vv[[0, 0]]);
        let out: Vec<f64> = points.iter().map(|&p| (-0.5 * (p - m) * (p - m) / v).exp()).collect();
        let out = Array2::from_shape_vec((points.len(), 1), out).expect("shape");
        Ok(self.push(out, Op::Gaussian { points, mu, var }))
    }

    pub fn row_gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: va.nrows(),
            });
        }
        let out = va.select(Axis(0), &indices);
        Ok(self.push(out, Op::RowGather(a, indices)))
    }

    /// Zero matrix with `rows` rows where row `indices[r]` receives row `r` of `a`
    /// (added, if an index repeats).
    pub fn row_scatter_add(&mut self, a: Var, indices: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() != indices.len() {
            return Err(Error::shape(
                "row_scatter_add",
                format!("{} rows for {} indices", va.nrows(), indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, len: rows });
        }
        let mut out = Array2::zeros((rows, va.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            let mut row = out.row_mut(i);
            row += &va.row(r);
        }
        Ok(self.push(out, Op::RowScatter(a, indices)))
    }

    /// `out[dst] += w_e * x[src]` over every edge `e`, in edge order.
    ///
    /// `weights` is an `E x 1` column. In mean mode each destination row is
    /// divided by its number of incoming edges.
    pub fn neighbor_aggregate(
        &mut self,
        edges: Arc<EdgeIndex>,
        x: Var,
        weights: Var,
        mode: AggregateMode,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weights));
        if vx.nrows() != edges.num_nodes {
            return Err(Error::shape(
                "neighbor_aggregate",
                format!("{} feature rows for {} nodes", vx.nrows(), edges.num_nodes),
            ));
        }
        if vw.dim() != (edges.len(), 1) {
            return Err(Error::shape(
                "neighbor_aggregate",
                format!("weights {:?} for {} edges", vw.dim(), edges.len()),
            ));
        }
        let inv_count = match mode {
            AggregateMode::Sum => None,
            AggregateMode::Mean => {
                let deg = edges.in_degree();
                if let Some(node) = deg.iter().position(|&d| d == 0) {
                    return Err(Error::EmptyNeighborhood(node));
                }
                Some(deg.iter().map(|&d| 1.0 / d as f64).collect::<Vec<_>>())
            }
        };
        let f = vx.ncols();
        let xs = vx.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; edges.num_nodes * f];
        for (e, (&s, &d)) in edges.src.iter().zip(&edges.dst).enumerate() {
            let w = vw[[e, 0]];
            let src_row = &xs[s * f..(s + 1) * f];
            let dst_row = &mut out[d * f..(d + 1) * f];
            for (o, &v) in dst_row.iter_mut().zip(src_row) {
                *o += w * v;
            }
        }
        if let Some(inv) = &inv_count {
            for (row, &c) in out.chunks_mut(f.max(1)).zip(inv) {
                row.iter_mut().for_each(|v| *v *= c);
            }
        }
        let out = Array2::from_shape_vec((edges.num_nodes, f), out).expect("shape");
        Ok(self.push(
            out,
            Op::Aggregate {
                x,
                weights,
                edges,
                inv_count,
            },
        ))
    }

    pub fn reduce(&mut self, a: Var, kind: Reduction, axis: ReduceAxis) -> Var {
        let va = self.value(a);
        let mut out = match axis {
            ReduceAxis::Rows => sum_over_rows(va),
            ReduceAxis::Cols => sum_over_cols(va),
            ReduceAxis::All => Array2::from_elem((1, 1), va.sum()),
        };
        if kind == Reduction::Mean {
            let n = match axis {
                ReduceAxis::Rows => va.nrows(),
                ReduceAxis::Cols => va.ncols(),
                ReduceAxis::All => va.len(),
            };
            out /= n as f64;
        }
        self.push(out, Op::Reduce(a, kind, axis))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::Sum, ReduceAxis::All)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Reduction::Mean, ReduceAxis::All)
    }

    /// Repeats a `1 x C` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let va = self.value(a);
        if va.nrows() != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected one row, got {:?}", va.dim())));
        }
        let out = repeat_row(va, rows);
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    /// Repeats an `R x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() != 1 {
            return Err(Error::shape("broadcast_cols", format!("expected one column, got {:?}", va.dim())));
        }
        let out = repeat_col(va, cols);
        Ok(self.push(out, Op::BroadcastCols(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", va.dim(), vb.dim())));
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("concat");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Mean squared error between `pred` and a constant target.
    pub fn mse(&mut self, pred: Var, target: &Array2<f64>) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Backward sweep from a `1 x 1` loss.
    ///
    /// Returns one entry per parameter in `store` (`None` when the parameter
    /// is unreachable from the loss).
    pub fn backward(&self, loss: Var, store_len: usize) -> Result<ParamGrads> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.nrows(),
                cols: lv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out: ParamGrads = vec![None; store_len];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScalarMul(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Powf(a, p) => {
                    let mut ga = g;
                    let p = *p;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        *gv *= if p == 2.0 { 2.0 * x } else { p * x.powf(p - 1.0) };
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, g * &node.value),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &t| *gv *= 1.0 - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= if x > 0.0 { 1.0 } else { x.exp() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowGather(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowScatter(a, idx) => {
                    let ga = g.select(Axis(0), idx);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Aggregate {
                    x,
                    weights,
                    edges,
                    inv_count,
                } => {
                    let (gx, gw) = aggregate_backward(
                        &g,
                        self.value(*x),
                        self.value(*weights),
                        edges,
                        inv_count.as_deref(),
                    );
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *weights, gw);
                }
                Op::Reduce(a, kind, axis) => {
                    let src = self.value(*a);
                    let scale = match (kind, axis) {
                        (Reduction::Sum, _) => 1.0,
                        (Reduction::Mean, ReduceAxis::Rows) => 1.0 / src.nrows() as f64,
                        (Reduction::Mean, ReduceAxis::Cols) => 1.0 / src.ncols() as f64,
                        (Reduction::Mean, ReduceAxis::All) => 1.0 / src.len() as f64,
                    };
                    let mut ga = match axis {
                        ReduceAxis::Rows => repeat_row(&g, src.nrows()),
                        ReduceAxis::Cols => repeat_col(&g, src.ncols()),
                        ReduceAxis::All => Array2::from_elem(src.raw_dim(), g[[0, 0]]),
                    };
                    if scale != 1.0 {
                        ga *= scale;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    accumulate(&mut grads, *a, sum_over_rows(&g));
                }
                Op::BroadcastCols(a) => {
                    accumulate(&mut grads, *a, sum_over_cols(&g));
                }
                Op::Gaussian { points, mu, var } => {
                    let m = self.value(*mu)[[0, 0]];
                    let v = self.value(*var)[[0, 0]];
                    let (mut gm, mut gv) = (0.0, 0.0);
                    for ((&p, &w), &gw) in points.iter().zip(&node.value).zip(&g) {
                        let d = p - m;
                        let t = gw * w * d / v;
                        gm += t;
                        gv += 0.5 * t * d / v;
                    }
                    accumulate(&mut grads, *mu, Array2::from_elem((1, 1), gm));
                    accumulate(&mut grads, *var, Array2::from_elem((1, 1), gv));
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
            }
        }
        Ok(out)
    }

    /// Backward sweep accumulated straight into the store's gradient buffers.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss, store.len())?;
        store.accumulate(&grads);
        Ok(())
    }
}

// ndarray's strided broadcasts and axis sums go element by element; these
// row-slice loops are several times faster on the skinny shapes used here.
fn repeat_row(a: &Array2<f64>, rows: usize) -> Array2<f64> {
    let row = a.row(0).to_vec();
    let mut out = Vec::with_capacity(rows * row.len());
    for _ in 0..rows {
        out.extend_from_slice(&row);
    }
    Array2::from_shape_vec((rows, row.len()), out).expect("shape")
}

fn repeat_col(a: &Array2<f64>, cols: usize) -> Array2<f64> {
    let mut out = Vec::with_capacity(a.nrows() * cols);
    for &v in a.column(0) {
        out.extend(std::iter::repeat_n(v, cols));
    }
    Array2::from_shape_vec((a.nrows(), cols), out).expect("shape")
}

fn sum_over_rows(a: &Array2<f64>) -> Array2<f64> {
    if a.ncols() == 1 {
        return Array2::from_elem((1, 1), a.iter().sum());
    }
    let mut acc = vec![0.0; a.ncols()];
    match a.as_slice() {
        Some(flat) => {
            for row in flat.chunks_exact(acc.len()) {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        None => {
            for row in a.rows() {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    Array2::from_shape_vec((1, acc.len()), acc).expect("shape")
}

fn sum_over_cols(a: &Array2<f64>) -> Array2<f64> {
    let out: Vec<f64> = a.rows().into_iter().map(|r| r.iter().sum()).collect();
    Array2::from_shape_vec((a.nrows(), 1), out).expect("shape")
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

fn aggregate_backward(
    g: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    edges: &EdgeIndex,
    inv_count: Option<&[f64]>,
) -> (Array2<f64>, Array2<f64>) {
    let f = x.ncols();
    let mut g = g.as_standard_layout().into_owned();
    if let Some(inv) = inv_count {
        for (mut row, &c) in g.rows_mut().into_iter().zip(inv) {
            row *= c;
        }
    }
    let gs = g.as_slice().expect("standard layout");
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let mut gx = vec![0.0; x.len()];
    let mut gw = Array2::zeros((edges.len(), 1));
    for (e, (&s, &d)) in edges.src.iter().zip(&edges.dst).enumerate() {
        let we = w[[e, 0]];
        let g_row = &gs[d * f..(d + 1) * f];
        let x_row = &xs[s * f..(s + 1) * f];
        let mut dot = 0.0;
        for (gv, xv) in g_row.iter().zip(x_row) {
            dot += gv * xv;
        }
        gw[[e, 0]] = dot;
        for (o, gv) in gx[s * f..(s + 1) * f].iter_mut().zip(g_row) {
            *o += we * gv;
        }
    }
    (Array2::from_shape_vec(x.raw_dim(), gx).expect("shape"), gw)
}
