//! Autoregressive rollout, its error metric, and probe-point extraction.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{distance, Graph, SnapshotSeries};
use crate::model::GraphUNet;

/// Anything that maps an `N x W` window to an `N x 1` next snapshot.
pub trait Predictor {
    fn window(&self) -> usize;
    fn predict(&self, g: &Graph, window: &Array2<f64>) -> Result<Array2<f64>>;
}

impl Predictor for GraphUNet {
    fn window(&self) -> usize {
        GraphUNet::window(self)
    }

    fn predict(&self, g: &Graph, window: &Array2<f64>) -> Result<Array2<f64>> {
        GraphUNet::predict(self, g, window)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// `S x N`: one predicted snapshot per row.
    pub predictions: Array2<f64>,
    /// Series index of the first predicted snapshot.
    pub start: usize,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.predictions.nrows()
    }
}

/// `N x W` window holding snapshots `end - W .. end` as columns, oldest first.
pub fn window_ending_at(series: &SnapshotSeries, end: usize, w: usize) -> Result<Array2<f64>> {
    if w == 0 || end < w || end > series.len() {
        return Err(Error::Invalid(format!(
            "window of {w} ending at {end} does not fit a series of {} snapshots",
            series.len()
        )));
    }
    Ok(series.fields.slice(s![end - w..end, ..]).t().to_owned())
}

/// Feeds each prediction back as the newest window column for `steps` steps.
pub fn rollout<P: Predictor + ?Sized>(
    model: &P,
    g: &Graph,
    seed_window: &Array2<f64>,
    steps: usize,
    start: usize,
) -> Result<RolloutResult> {
    let w = model.window();
    if seed_window.ncols() != w {
        return Err(Error::shape(
            "rollout",
            format!("seed window has {} snapshots, model expects {w}", seed_window.ncols()),
        ));
    }
    if seed_window.nrows() != g.num_nodes() {
        return Err(Error::shape(
            "rollout",
            format!("seed window has {} rows for a {}-node graph", seed_window.nrows(), g.num_nodes()),
        ));
    }
    if steps == 0 {
        return Err(Error::Invalid("rollout horizon must be at least 1".into()));
    }
    let n = g.num_nodes();
    let mut window = seed_window.to_owned();
    let mut predictions = Array2::zeros((steps, n));
    for step in 0..steps {
        let next = model.predict(g, &window)?;
        if next.dim() != (n, 1) {
            return Err(Error::shape("rollout", format!("prediction shape {:?}", next.dim())));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("rollout prediction at step {step}")));
        }
        predictions.row_mut(step).assign(&next.column(0));
        if w > 1 {
            let shifted = window.slice(s![.., 1..]).to_owned();
            window.slice_mut(s![.., ..w - 1]).assign(&shifted);
        }
        window.column_mut(w - 1).assign(&next.column(0));
    }
    Ok(RolloutResult { predictions, start })
}

/// Rolls out from the `W` snapshots preceding `start` and returns the matching truth rows.
pub fn rollout_from_series<P: Predictor + ?Sized>(
    model: &P,
    g: &Graph,
    series: &SnapshotSeries,
    start: usize,
    steps: usize,
) -> Result<(RolloutResult, Array2<f64>)> {
    series.check_graph(g)?;
    if start + steps > series.len() {
        return Err(Error::Invalid(format!(
            "truth for steps {start}..{} exceeds the series length {}",
            start + steps,
            series.len()
        )));
    }
    let seed = window_ending_at(series, start, model.window())?;
    let result = rollout(model, g, &seed, steps, start)?;
    let truth = series.fields.slice(s![start..start + steps, ..]).to_owned();
    Ok((result, truth))
}

/// Mean over steps and nodes of the squared error.
pub fn rollout_mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape("rollout_mse", format!("{:?} vs {:?}", pred.dim(), truth.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("empty rollout".into()));
    }
    let per_step = (pred - truth)
        .mapv(|d| d * d)
        .mean_axis(Axis(1))
        .expect("non-empty");
    Ok(per_step.mean().expect("non-empty"))
}

/// Probe points of the cylinder wake: x = 0.6 m, y = 0.05..0.35 m.
pub fn default_probe_points() -> Vec<[f64; 2]> {
    (1..=7).map(|i| [0.6, 0.05 * i as f64]).collect()
}

/// Points bound to their nearest mesh node.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub points: Vec<[f64; 2]>,
    pub nodes: Vec<usize>,
    /// Points lying outside the mesh bounding box (still bound to the nearest node).
    pub outside: Vec<bool>,
}

impl ProbeSet {
    pub fn bind(g: &Graph, points: &[[f64; 2]]) -> Result<ProbeSet> {
        if g.num_nodes() == 0 {
            return Err(Error::Invalid("cannot bind probes to an empty graph".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in g.coords() {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let mut nodes = Vec::with_capacity(points.len());
        let mut outside = Vec::with_capacity(points.len());
        for &p in points {
            let mut best = (f64::INFINITY, 0usize);
            for (i, &c) in g.coords().iter().enumerate() {
                let d = distance(p, c);
                if d < best.0 {
                    best = (d, i);
                }
            }
            let out = (0..2).any(|k| p[k] < lo[k] || p[k] > hi[k]);
            if out {
                log::warn!("probe ({}, {}) lies outside the mesh bounding box", p[0], p[1]);
            }
            nodes.push(best.1);
            outside.push(out);
        }
        Ok(ProbeSet {
            points: points.to_vec(),
            nodes,
            outside,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `S x P` matrix of the bound node values for each snapshot row of `values` (`S x N`).
pub fn probe_trace(values: &Array2<f64>, probes: &ProbeSet) -> Result<Array2<f64>> {
    if let Some(&bad) = probes.nodes.iter().find(|&&n| n >= values.ncols()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: values.ncols(),
        });
    }
    Ok(values.select(Axis(1), &probes.nodes))
}
