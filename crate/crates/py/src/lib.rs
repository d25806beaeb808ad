//! Python bindings: meshes, snapshot series, models, training and rollout.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`), which
//! `numpy.array` accepts directly.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyFileExistsError, PyIOError, PyValueError};
use pyo3::prelude::*;

use meshflow::config::ExperimentConfig;
use meshflow::experiment;
use meshflow::formats;
use meshflow::synth::{generate_mesh, generate_series, scenario_by_name, scenario_catalog};
use meshflow::{build_graph, Error, Graph, GraphUNet, ModelConfig, SnapshotSeries};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::AlreadyExists(p) => PyFileExistsError::new_err(p),
        e @ (Error::NonFinite(_) | Error::NonFiniteGradient(_)) => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix: rows differ in length"));
    }
    Ok(Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).expect("checked"))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Immutable 2D mesh graph.
#[pyclass(name = "Mesh", module = "meshflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: Graph,
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(coords: Vec<(f64, f64)>, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        let coords = coords.into_iter().map(|(x, y)| [x, y]).collect();
        Ok(PyMesh {
            inner: build_graph(coords, &edges).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyMesh {
            inner: formats::load_mesh(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::save_mesh(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    /// Directed edge count (each undirected pair counted twice).
    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    fn coords(&self) -> Vec<(f64, f64)> {
        self.inner.coords().iter().map(|c| (c[0], c[1])).collect()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.undirected_edges()
    }

    fn mean_edge_length(&self) -> f64 {
        self.inner.mean_edge_length()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(nodes={}, edges={})", self.inner.num_nodes(), self.inner.undirected_edges().len())
    }
}

/// Snapshot series: `T x N` field values with a time step.
#[pyclass(name = "Series", module = "meshflow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySeries {
    inner: SnapshotSeries,
}

#[pymethods]
impl PySeries {
    #[new]
    fn new(graph_id: String, dt: f64, fields: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PySeries {
            inner: SnapshotSeries::new(graph_id, dt, to_array(fields)?).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySeries {
            inner: formats::load_series(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::save_series(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn graph_id(&self) -> String {
        self.inner.graph_id.clone()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn fields(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.fields)
    }

    fn __repr__(&self) -> String {
        format!(
            "Series(graph_id={:?}, snapshots={}, nodes={})",
            self.inner.graph_id,
            self.inner.len(),
            self.inner.num_nodes()
        )
    }
}

/// Graph U-Net model.
#[pyclass(name = "Model", module = "meshflow")]
struct PyModel {
    inner: GraphUNet,
}

fn model_config(overrides: &[String]) -> PyResult<ModelConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(overrides).map_err(to_py)?;
    Ok(cfg.model)
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model from `model.*`/`train.window` overrides.
    #[new]
    #[pyo3(signature = (overrides = Vec::new()))]
    fn new(overrides: Vec<String>) -> PyResult<Self> {
        Ok(PyModel {
            inner: GraphUNet::build(model_config(&overrides)?).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: formats::load_model(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::save_model(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn window(&self) -> usize {
        self.inner.window()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    /// `window` is `N x W`, oldest snapshot first; returns `N x 1`.
    fn predict(&self, mesh: &PyMesh, window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let w = to_array(window)?;
        Ok(to_rows(&self.inner.predict(&mesh.inner, &w).map_err(to_py)?))
    }

    /// Returns the `steps x N` predicted snapshots.
    fn rollout(&self, mesh: &PyMesh, seed_window: Vec<Vec<f64>>, steps: usize) -> PyResult<Vec<Vec<f64>>> {
        let w = to_array(seed_window)?;
        let r = meshflow::rollout(&self.inner, &mesh.inner, &w, steps, 0).map_err(to_py)?;
        Ok(to_rows(&r.predictions))
    }

    /// Original node indices kept at each pooling level for the given window.
    fn pooled_nodes(&self, mesh: &PyMesh, window: Vec<Vec<f64>>) -> PyResult<Vec<Vec<usize>>> {
        let w = to_array(window)?;
        experiment::pooled_levels(&self.inner, &mesh.inner, &w).map_err(to_py)
    }

    fn config_text(&self) -> String {
        meshflow::config::model_config_text(&self.inner.config)
    }
}

/// Trains with the given `key=value` overrides; returns the model and the per-epoch clean losses.
#[pyfunction]
#[pyo3(signature = (overrides = Vec::new(), workers = 1))]
fn train(py: Python<'_>, overrides: Vec<String>, workers: usize) -> PyResult<(PyModel, Vec<f64>)> {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&overrides).map_err(to_py)?;
    let outcome = py
        .detach(|| experiment::run_training(&cfg, workers, |_| {}))
        .map_err(to_py)?;
    let losses = outcome.report.trace.iter().map(|r| r.loss).collect();
    Ok((PyModel { inner: outcome.model }, losses))
}

/// Generates a catalog scenario: `(mesh, series)`.
#[pyfunction]
#[pyo3(signature = (name, snapshots = 400))]
fn generate(name: &str, snapshots: usize) -> PyResult<(PyMesh, PySeries)> {
    let spec = scenario_by_name(name).map_err(to_py)?;
    let g = generate_mesh(&spec).map_err(to_py)?;
    let s = generate_series(&spec, &g, snapshots).map_err(to_py)?;
    Ok((PyMesh { inner: g }, PySeries { inner: s }))
}

/// One line per catalog scenario.
#[pyfunction]
fn catalog() -> Vec<String> {
    scenario_catalog().iter().map(ToString::to_string).collect()
}

#[pyfunction]
fn rollout_mse(pred: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<f64> {
    meshflow::rollout_mse(&to_array(pred)?, &to_array(truth)?).map_err(to_py)
}

#[pymodule]
#[pyo3(name = "meshflow")]
fn meshflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PySeries>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(rollout_mse, m)?)?;
    Ok(())
}
