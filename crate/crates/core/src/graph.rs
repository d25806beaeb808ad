//! Immutable mesh graphs and per-node snapshot series.
//!
//! A [`Graph`] stores every undirected mesh edge as two directed edges sorted
//! by `(src, dst)`, with a CSR offset table over sources. Because the edge set
//! is symmetric, the out-neighbors of a node are also its in-neighbors.

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Directed edge list shared with the differentiation tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Number of incoming edges per node.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &d in &self.dst {
            deg[d] += 1;
        }
        deg
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    coords: Vec<[f64; 2]>,
    edges: Arc<EdgeIndex>,
    edge_attr: Arc<Vec<f64>>,
    offsets: Vec<usize>,
    with_self_loops: OnceLock<(Arc<EdgeIndex>, Arc<Vec<f64>>)>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords
            && self.edges == other.edges
            && self.edge_attr == other.edge_attr
    }
}

/// Problems that do not prevent construction but deserve a loud report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    /// Undirected pairs `(i, j)`, `i < j`, whose endpoints coincide.
    pub zero_length_edges: Vec<(usize, usize)>,
    pub isolated_nodes: Vec<usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.zero_length_edges.is_empty() && self.isolated_nodes.is_empty()
    }
}

pub(crate) fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Builds a graph from node positions and undirected index pairs.
pub fn build_graph(coords: Vec<[f64; 2]>, undirected_edges: &[(usize, usize)]) -> Result<Graph> {
    let n = coords.len();
    let mut seen = HashSet::with_capacity(undirected_edges.len());
    let mut directed = Vec::with_capacity(2 * undirected_edges.len());
    for &(i, j) in undirected_edges {
        for idx in [i, j] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, len: n });
            }
        }
        if i == j {
            return Err(Error::SelfPair(i));
        }
        if !seen.insert((i.min(j), i.max(j))) {
            return Err(Error::DuplicateEdge(i, j));
        }
        directed.push((i, j));
        directed.push((j, i));
    }
    directed.sort_unstable();
    Ok(Graph::from_sorted_directed(coords, &directed))
}

impl Graph {
    /// `directed` must be sorted, symmetric and free of duplicates.
    pub(crate) fn from_sorted_directed(coords: Vec<[f64; 2]>, directed: &[(usize, usize)]) -> Graph {
        let n = coords.len();
        let mut offsets = vec![0usize; n + 1];
        let mut src = Vec::with_capacity(directed.len());
        let mut dst = Vec::with_capacity(directed.len());
        let mut attr = Vec::with_capacity(directed.len());
        for &(s, d) in directed {
            offsets[s + 1] += 1;
            src.push(s);
            dst.push(d);
            attr.push(distance(coords[s], coords[d]));
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Graph {
            coords,
            edges: Arc::new(EdgeIndex {
                num_nodes: n,
                src,
                dst,
            }),
            edge_attr: Arc::new(attr),
            offsets,
            with_self_loops: OnceLock::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Number of directed edges.
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn edge_index(&self) -> &Arc<EdgeIndex> {
        &self.edges
    }

    pub fn edge_attr(&self) -> &Arc<Vec<f64>> {
        &self.edge_attr
    }

    /// Directed edges as `(src, dst)` pairs in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.src.iter().copied().zip(self.edges.dst.iter().copied())
    }

    /// Undirected pairs `(i, j)` with `i < j`, in storage order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.edges().filter(|(s, d)| s < d).collect()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.edges.dst[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.neighbors(src).binary_search(&dst).is_ok()
    }

    pub fn mean_edge_length(&self) -> f64 {
        if self.edge_attr.is_empty() {
            return 0.0;
        }
        self.edge_attr.iter().sum::<f64>() / self.edge_attr.len() as f64
    }

    /// Edge list with one synthetic self-edge per node appended (pseudo-coordinate 0).
    pub fn self_loop_edges(&self) -> (Arc<EdgeIndex>, Arc<Vec<f64>>) {
        self.with_self_loops
            .get_or_init(|| {
                let n = self.num_nodes();
                let mut src = self.edges.src.clone();
                let mut dst = self.edges.dst.clone();
                let mut attr = (*self.edge_attr).clone();
                src.extend(0..n);
                dst.extend(0..n);
                attr.extend(std::iter::repeat_n(0.0, n));
                (
                    Arc::new(EdgeIndex {
                        num_nodes: n,
                        src,
                        dst,
                    }),
                    Arc::new(attr),
                )
            })
            .clone()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for ((s, d), &a) in self.edges().zip(self.edge_attr.iter()) {
            if s < d && a == 0.0 {
                report.zero_length_edges.push((s, d));
            }
        }
        report.isolated_nodes = (0..self.num_nodes()).filter(|&i| self.degree(i) == 0).collect();
        report
    }

    /// Subgraph on `nodes`, renumbered in the given order. Duplicates are not allowed.
    pub(crate) fn select_nodes(&self, nodes: &[usize]) -> Graph {
        let mut new_index = vec![usize::MAX; self.num_nodes()];
        for (new, &old) in nodes.iter().enumerate() {
            new_index[old] = new;
        }
        let mut directed: Vec<(usize, usize)> = self
            .edges()
            .filter_map(|(s, d)| {
                let (ns, nd) = (new_index[s], new_index[d]);
                (ns != usize::MAX && nd != usize::MAX).then_some((ns, nd))
            })
            .collect();
        directed.sort_unstable();
        let coords = nodes.iter().map(|&i| self.coords[i]).collect();
        Graph::from_sorted_directed(coords, &directed)
    }

    /// Pairs `(i, j)`, `i != j`, joined by a walk of exactly two edges.
    pub(crate) fn two_hop_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut mark = vec![usize::MAX; self.num_nodes()];
        for i in 0..self.num_nodes() {
            let start = out.len();
            for &m in self.neighbors(i) {
                for &j in self.neighbors(m) {
                    if j != i && mark[j] != i {
                        mark[j] = i;
                        out.push((i, j));
                    }
                }
            }
            out[start..].sort_unstable();
        }
        out
    }

    pub(crate) fn with_directed_edges(&self, directed: &[(usize, usize)]) -> Graph {
        Graph::from_sorted_directed(self.coords.clone(), directed)
    }
}

/// Correspondence between the nodes of a graph and a truncated copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMap {
    /// Retained original indices, in new-index order.
    pub kept: Vec<usize>,
    /// Original index -> new index.
    pub old_to_new: Vec<Option<usize>>,
}

/// Keeps the nodes whose coordinates satisfy `keep`, renumbered densely in original order.
pub fn induced_subgraph<F>(g: &Graph, keep: F) -> Result<(Graph, NodeMap)>
where
    F: Fn([f64; 2]) -> bool,
{
    let kept: Vec<usize> = (0..g.num_nodes()).filter(|&i| keep(g.coords[i])).collect();
    if kept.is_empty() {
        return Err(Error::EmptySubgraph);
    }
    let mut old_to_new = vec![None; g.num_nodes()];
    for (new, &old) in kept.iter().enumerate() {
        old_to_new[old] = Some(new);
    }
    let mut directed: Vec<(usize, usize)> = Vec::new();
    let mut attr = Vec::new();
    for ((s, d), &a) in g.edges().zip(g.edge_attr.iter()) {
        if let (Some(ns), Some(nd)) = (old_to_new[s], old_to_new[d]) {
            directed.push((ns, nd));
            attr.push(a);
        }
    }
    // renumbering is monotone, so (src, dst) order is preserved
    let coords: Vec<[f64; 2]> = kept.iter().map(|&i| g.coords[i]).collect();
    let mut sub = Graph::from_sorted_directed(coords, &directed);
    sub.edge_attr = Arc::new(attr);
    Ok((sub, NodeMap { kept, old_to_new }))
}

/// Time series of one scalar field over the nodes of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub graph_id: String,
    pub dt: f64,
    /// `T x N`: one row per snapshot.
    pub fields: Array2<f64>,
}

impl SnapshotSeries {
    pub fn new(graph_id: impl Into<String>, dt: f64, fields: Array2<f64>) -> Result<Self> {
        let s = SnapshotSeries {
            graph_id: graph_id.into(),
            dt,
            fields,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Invalid(format!(
                "series needs at least 2 snapshots, got {}",
                self.len()
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.nrows() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.fields.ncols()
    }

    pub fn check_graph(&self, g: &Graph) -> Result<()> {
        if self.num_nodes() != g.num_nodes() {
            return Err(Error::shape(
                "series",
                format!("series has {} nodes, graph has {}", self.num_nodes(), g.num_nodes()),
            ));
        }
        Ok(())
    }

    /// Population variance over every entry.
    pub fn variance(&self) -> f64 {
        self.fields.var(0.0)
    }
}

/// Selects node columns `kept` from every snapshot.
pub fn restrict_series(s: &SnapshotSeries, kept: &[usize]) -> Result<SnapshotSeries> {
    if let Some(&bad) = kept.iter().find(|&&i| i >= s.num_nodes()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: s.num_nodes(),
        });
    }
    let fields = s.fields.select(Axis(1), kept);
    SnapshotSeries::new(s.graph_id.clone(), s.dt, fields)
}
