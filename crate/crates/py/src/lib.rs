//! Python bindings: jets, sequences, diagonal trains, basin membership and
//! whole pipeline runs.

use basinforge::basin::basin_membership;
use basinforge::jet::{compose, invert_formal, PolyMap2};
use basinforge::linalg::{Mat2, Vec2};
use basinforge::pipeline::{preset, run, Pipeline, RunConfig};
use basinforge::sequence::{generate, SequenceSpec};
use basinforge::train_diagonal::{build_from_logs, DiagonalLogs};
use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type TrainRow = (usize, usize, usize, Option<usize>);

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Truncated polynomial germ of C^2.
#[pyclass(name = "Jet", module = "basinforge_py", from_py_object)]
#[derive(Clone)]
pub struct Jet {
    pub inner: PolyMap2,
}

#[pymethods]
impl Jet {
    #[new]
    fn new(k: usize) -> Self {
        Jet { inner: PolyMap2::zero(k) }
    }

    #[staticmethod]
    fn identity(k: usize) -> Self {
        Jet { inner: PolyMap2::identity(k) }
    }

    /// Linear germ from a row-major 2x2 matrix.
    #[staticmethod]
    fn linear(m: [[Complex64; 2]; 2], k: usize) -> Self {
        let m = Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
        Jet { inner: PolyMap2::linear(&m, k) }
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        PolyMap2::from_json(s).map(|inner| Jet { inner }).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn cutoff(&self) -> usize {
        self.inner.cutoff()
    }

    fn get(&self, comp: usize, i: usize, j: usize) -> Complex64 {
        self.inner.get(comp, i, j)
    }

    fn set(&mut self, comp: usize, i: usize, j: usize, v: Complex64) -> PyResult<()> {
        if comp > 1 || i + j > self.inner.cutoff() {
            return Err(py_err(format!("no coefficient ({comp}, {i}, {j}) at cutoff {}", self.inner.cutoff())));
        }
        self.inner.set(comp, i, j, v);
        Ok(())
    }

    fn evaluate(&self, z: Complex64, w: Complex64) -> (Complex64, Complex64) {
        let v = self.inner.evaluate(&Vec2::new(z, w));
        (v.z, v.w)
    }

    /// `self o other`, truncated at `k` (default: the smaller cutoff).
    #[pyo3(signature = (other, k = None))]
    fn compose(&self, other: &Jet, k: Option<usize>) -> PyResult<Jet> {
        let k = k.unwrap_or(self.inner.cutoff().min(other.inner.cutoff()));
        compose(&self.inner, &other.inner, k).map(|inner| Jet { inner }).map_err(py_err)
    }

    #[pyo3(signature = (k = None))]
    fn inverse(&self, k: Option<usize>) -> PyResult<Jet> {
        invert_formal(&self.inner, k.unwrap_or(self.inner.cutoff())).map(|inner| Jet { inner }).map_err(py_err)
    }

    fn max_diff(&self, other: &Jet) -> f64 {
        self.inner.max_diff(&other.inner)
    }

    fn max_diff_identity(&self) -> f64 {
        self.inner.max_diff_identity()
    }

    fn __repr__(&self) -> String {
        format!("Jet(K={}, terms={})", self.inner.cutoff(), self.inner.terms().filter(|t| t.3.norm() > 0.0).count())
    }
}

/// Germ `f_n` of a sequence given as a JSON spec.
#[pyfunction]
fn generate_germ(spec_json: &str, n: usize) -> PyResult<Jet> {
    let spec: SequenceSpec = serde_json::from_str(spec_json).map_err(py_err)?;
    generate(&spec, n).map(|inner| Jet { inner }).map_err(py_err)
}

/// Trains `(j, p, q, p_next)` from per-step log moduli of the diagonal entries.
#[pyfunction]
fn diagonal_trains(ln_a: Vec<f64>, ln_b: Vec<f64>, k: usize, d: f64) -> PyResult<Vec<TrainRow>> {
    if ln_a.len() != ln_b.len() {
        return Err(py_err("log arrays differ in length"));
    }
    let part = build_from_logs(&DiagonalLogs::from_logs(&ln_a, &ln_b), k, d);
    Ok(part.trains.iter().map(|t| (t.j, t.p, t.q, t.p_next)).collect())
}

/// Verdict of the forward orbit of `(z, w)`: converged, escaped or undecided.
#[pyfunction]
#[pyo3(signature = (germs, z, w, threshold = 0.5, d = None))]
fn membership(germs: Vec<Jet>, z: Complex64, w: Complex64, threshold: f64, d: Option<f64>) -> String {
    let germs: Vec<PolyMap2> = germs.into_iter().map(|j| j.inner).collect();
    let rec = basin_membership(&germs, d, &Vec2::new(z, w), threshold, germs.len());
    serde_json::to_value(rec.verdict).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// TOML of a built-in preset: "diagonal", "general" or "autonomous".
#[pyfunction]
fn preset_toml(pipeline: &str) -> PyResult<String> {
    let p: Pipeline = pipeline.parse().map_err(py_err)?;
    Ok(preset(p).to_toml())
}

/// Runs a pipeline from TOML and returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, verify_only = false))]
fn run_config(py: Python<'_>, config_toml: &str, verify_only: bool) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    py.detach(|| run(&cfg, verify_only)).map(|o| o.summary.to_json()).map_err(py_err)
}

/// Adds the classes and functions to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Jet>()?;
    m.add_function(wrap_pyfunction!(generate_germ, m)?)?;
    m.add_function(wrap_pyfunction!(diagonal_trains, m)?)?;
    m.add_function(wrap_pyfunction!(membership, m)?)?;
    m.add_function(wrap_pyfunction!(preset_toml, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}

#[pymodule]
fn basinforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
