//! Analytic vortex-street surrogate: seeded unstructured meshes around a
//! cylinder and exactly periodic x-velocity snapshot series.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_graph, distance, Graph, SnapshotSeries};

/// Snapshot spacing of every generated series (s).
pub const SNAPSHOT_DT: f64 = 0.01;

const MAX_MESH_ATTEMPTS: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    /// `[x_min, x_max]`.
    pub x_range: [f64; 2],
    /// `[y_min, y_max]`.
    pub y_range: [f64; 2],
    pub center: [f64; 2],
    pub diameter: f64,
    /// Peak of the parabolic inflow profile (m/s).
    pub inflow: f64,
    /// Shedding period in snapshots.
    pub period: usize,
    pub nodes: usize,
    /// Wake oscillation amplitude (m/s).
    pub amplitude: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.diameter / 2.0;
        let [x0, x1] = self.x_range;
        let [y0, y1] = self.y_range;
        let [cx, cy] = self.center;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Invalid(format!("scenario `{}`: empty domain", self.name)));
        }
        if !(self.diameter > 0.0 && cx - r > x0 && cx + r < x1 && cy - r > y0 && cy + r < y1) {
            return Err(Error::Invalid(format!(
                "scenario `{}`: cylinder must lie strictly inside the domain",
                self.name
            )));
        }
        if self.period < 4 {
            return Err(Error::Invalid(format!("scenario `{}`: period must be >= 4", self.name)));
        }
        if self.nodes < 50 {
            return Err(Error::Invalid(format!("scenario `{}`: at least 50 nodes required", self.name)));
        }
        if !(self.inflow > 0.0 && self.amplitude >= 0.0) {
            return Err(Error::Invalid(format!("scenario `{}`: invalid velocities", self.name)));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    /// Wake wavelength: convection at 85% of the mean inflow over one period.
    pub fn wavelength(&self) -> f64 {
        0.85 * (2.0 * self.inflow / 3.0) * self.period as f64 * SNAPSHOT_DT
    }

    fn inside_cylinder(&self, p: [f64; 2]) -> bool {
        distance(p, self.center) <= self.radius()
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} period={} inflow={} diameter={} center=({}, {}) nodes={} amplitude={} seed={}",
            self.name,
            self.period,
            self.inflow,
            self.diameter,
            self.center[0],
            self.center[1],
            self.nodes,
            self.amplitude,
            self.seed
        )
    }
}

fn spec(name: &str, period: usize, inflow: f64, diameter: f64, center: [f64; 2], seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        name: name.to_string(),
        x_range: [0.0, 1.6],
        y_range: [0.0, 0.41],
        center,
        diameter,
        inflow,
        period,
        nodes: 400,
        amplitude: 0.35 * inflow,
        seed,
    }
}

/// Baseline and the three inductive scenarios.
pub fn scenario_catalog() -> Vec<ScenarioSpec> {
    vec![
        spec("baseline", 29, 1.78, 0.074, [0.2, 0.2], 11),
        spec("induct1", 28, 2.21, 0.116, [0.25, 0.21], 23),
        spec("induct2", 28, 2.02, 0.089, [0.22, 0.19], 37),
        spec("induct3", 40, 1.68, 0.158, [0.3, 0.2], 41),
    ]
}

pub fn scenario_by_name(name: &str) -> Result<ScenarioSpec> {
    scenario_catalog()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`")))
}

/// Seeded point cloud of exactly `spec.nodes` points, denser near the cylinder.
fn sample_points(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let [x0, x1] = spec.x_range;
    let [y0, y1] = spec.y_range;
    let (w, h) = (x1 - x0, y1 - y0);
    let r = spec.radius();
    let spacing = (w * h / spec.nodes as f64).sqrt();
    let mut pts = Vec::with_capacity(spec.nodes);

    let ring = ((std::f64::consts::PI * spec.diameter / (0.5 * spacing)).round() as usize).max(8);
    for k in 0..ring {
        let a = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
        pts.push([spec.center[0] + r * a.cos(), spec.center[1] + r * a.sin()]);
    }
    let edge = 2.0 * spacing;
    let nx = ((w / edge).round() as usize).max(2);
    let ny = ((h / edge).round() as usize).max(2);
    for i in 0..nx {
        let x = x0 + w * i as f64 / nx as f64;
        pts.push([x, y0]);
        pts.push([x + w / nx as f64, y1]);
    }
    for j in 0..ny {
        let y = y0 + h * j as f64 / ny as f64;
        pts.push([x1, y]);
        pts.push([x0, y + h / ny as f64]);
    }
    pts.truncate(spec.nodes);

    // density weight in [1, 4], decaying with distance from the cylinder wall
    let weight = |p: [f64; 2]| 1.0 + 3.0 * (-(distance(p, spec.center) - r).max(0.0) / (2.0 * spec.diameter)).exp();
    let mut min_gap = 0.6 * spacing;
    let mut misses = 0usize;
    while pts.len() < spec.nodes {
        let p = [x0 + w * rng.random::<f64>(), y0 + h * rng.random::<f64>()];
        let wp = weight(p);
        if rng.random::<f64>() * 4.0 > wp || distance(p, spec.center) < r + 0.3 * min_gap {
            continue;
        }
        let gap = min_gap / wp.sqrt();
        let margin = 0.3 * gap;
        if p[0] < x0 + margin || p[0] > x1 - margin || p[1] < y0 + margin || p[1] > y1 - margin {
            continue;
        }
        if pts.iter().any(|&q| distance(p, q) < gap) {
            misses += 1;
            if misses > 2000 {
                min_gap *= 0.9;
                misses = 0;
            }
            continue;
        }
        misses = 0;
        pts.push(p);
    }
    pts
}

fn triangulate(spec: &ScenarioSpec, pts: &[[f64; 2]]) -> Option<Vec<(usize, usize)>> {
    let points: Vec<delaunator::Point> = pts.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let tri = delaunator::triangulate(&points);
    if tri.triangles.is_empty() {
        return None;
    }
    let mut edges = BTreeSet::new();
    let mut used = vec![false; pts.len()];
    for t in tri.triangles.chunks_exact(3) {
        let centroid = [
            (pts[t[0]][0] + pts[t[1]][0] + pts[t[2]][0]) / 3.0,
            (pts[t[0]][1] + pts[t[1]][1] + pts[t[2]][1]) / 3.0,
        ];
        if spec.inside_cylinder(centroid) {
            continue;
        }
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.insert((a.min(b), a.max(b)));
            used[a] = true;
            used[b] = true;
        }
    }
    used.iter().all(|&u| u).then(|| edges.into_iter().collect())
}

/// Seeded Delaunay mesh of the domain minus the cylinder.
pub fn generate_mesh(spec: &ScenarioSpec) -> Result<Graph> {
    spec.validate()?;
    for attempt in 0..MAX_MESH_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9)));
        let mut pts = sample_points(spec, &mut rng);
        if attempt > 0 {
            // jitter interior samples to break exact degeneracies
            let jitter = 1e-6 * (spec.x_range[1] - spec.x_range[0]);
            for p in pts.iter_mut() {
                if !on_boundary(spec, *p) {
                    p[0] += jitter * (rng.random::<f64>() - 0.5);
                    p[1] += jitter * (rng.random::<f64>() - 0.5);
                }
            }
        }
        if let Some(edges) = triangulate(spec, &pts) {
            let g = build_graph(pts, &edges)?;
            if g.validate().is_clean() {
                return Ok(g);
            }
        }
        log::debug!("mesh attempt {attempt} for `{}` was degenerate, retrying", spec.name);
    }
    Err(Error::Invalid(format!(
        "could not triangulate scenario `{}` after {MAX_MESH_ATTEMPTS} attempts",
        spec.name
    )))
}

fn on_boundary(spec: &ScenarioSpec, p: [f64; 2]) -> bool {
    let tol = 1e-12;
    (p[0] - spec.x_range[0]).abs() < tol
        || (p[0] - spec.x_range[1]).abs() < tol
        || (p[1] - spec.y_range[0]).abs() < tol
        || (p[1] - spec.y_range[1]).abs() < tol
        || (distance(p, spec.center) - spec.radius()).abs() < 1e-9
}

/// x-velocity at `p` and integer snapshot `t`.
pub fn velocity(spec: &ScenarioSpec, p: [f64; 2], t: usize) -> f64 {
    let [y0, y1] = spec.y_range;
    let hgt = y1 - y0;
    let r = spec.radius();
    let d = spec.diameter;
    let (x, y) = (p[0], p[1]);
    let profile = 4.0 * (y - y0) * (y1 - y) / (hgt * hgt);
    let dist = distance(p, spec.center);
    let blockage = if dist <= r { 0.0 } else { 1.0 - (-((dist - r) / r).powi(2)).exp() };
    let base = spec.inflow * profile * blockage;

    let dx = x - spec.center[0];
    if dx <= 0.0 {
        return base;
    }
    let envelope = 1.0 - (-(dx / (2.0 * d)).powi(2)).exp();
    let eta = (y - spec.center[1]) / (1.5 * d);
    let phase = (t % spec.period) as f64 / spec.period as f64 - dx / spec.wavelength();
    let wave = (2.0 * std::f64::consts::PI * phase + std::f64::consts::PI * eta).sin();
    base + spec.amplitude * envelope * wave * (-eta * eta).exp()
}

/// `T` snapshots of the surrogate field on the nodes of `g`.
pub fn generate_series(spec: &ScenarioSpec, g: &Graph, snapshots: usize) -> Result<SnapshotSeries> {
    spec.validate()?;
    let fields = Array2::from_shape_fn((snapshots, g.num_nodes()), |(t, n)| velocity(spec, g.coords()[n], t));
    SnapshotSeries::new(spec.name.clone(), SNAPSHOT_DT, fields)
}
