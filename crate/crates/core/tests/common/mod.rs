#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use meshflow::{build_graph, Graph};
use ndarray::Array2;
use rand::Rng;

/// Random planar-ish graph: `n` nodes in the unit square, each pair joined with probability `p`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> Graph {
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    build_graph(coords, &edges).unwrap()
}

/// Like [`random_graph`] but every node gets at least one neighbor (a random spanning chain is added).
pub fn connected_graph<R: Rng>(rng: &mut R, n: usize, p: f64) -> Graph {
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if j == i + 1 || rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    build_graph(coords, &edges).unwrap()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Dense weighted adjacency `A[i][j]` (0 when absent).
pub fn dense_adjacency(g: &Graph, weighted: bool) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = Array2::zeros((n, n));
    for (i, j) in g.undirected_edges() {
        let w = if weighted { dist(g.coords()[i], g.coords()[j]) } else { 1.0 };
        a[[i, j]] = w;
        a[[j, i]] = w;
    }
    a
}
