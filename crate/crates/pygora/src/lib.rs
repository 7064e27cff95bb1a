//! Python bindings: the matrix type, the allocation and initialization
//! primitives, and the full pipeline behind one function call.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gora::adapter::ScalingMode;
use gora::allocate::{self, AllocConfig, ImportanceMetric};
use gora::error::GoraError;
use gora::init;
use gora::numerics;
use gora::verify;

fn to_py_err(e: GoraError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_mode(mode: &str) -> PyResult<ScalingMode> {
    match mode {
        "lora" => Ok(ScalingMode::Lora),
        "rslora" => Ok(ScalingMode::RsLora),
        other => Err(PyValueError::new_err(format!("unknown scaling mode `{other}`"))),
    }
}

fn parse_metric(metric: &str) -> PyResult<ImportanceMetric> {
    match metric {
        "sensitivity" => Ok(ImportanceMetric::Sensitivity),
        "nuclear_grad" => Ok(ImportanceMetric::NuclearGrad),
        "nuclear_prod" => Ok(ImportanceMetric::NuclearProd),
        other => Err(PyValueError::new_err(format!("unknown metric `{other}`"))),
    }
}

/// Dense f64 matrix, row-major.
#[pyclass(name = "Matrix", from_py_object)]
#[derive(Clone)]
struct PyMatrix {
    inner: numerics::Matrix,
}

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(PyValueError::new_err("matrix needs at least one entry"));
        }
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(PyValueError::new_err("ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(PyMatrix { inner: numerics::Matrix::from_vec(r, c, data).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        PyMatrix { inner: numerics::Matrix::zeros(rows, cols) }
    }

    #[staticmethod]
    fn identity(n: usize) -> Self {
        PyMatrix { inner: numerics::Matrix::identity(n) }
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn matmul(&self, other: &PyMatrix) -> PyResult<PyMatrix> {
        Ok(PyMatrix { inner: self.inner.matmul(&other.inner).map_err(to_py_err)? })
    }

    fn transpose(&self) -> PyMatrix {
        PyMatrix { inner: self.inner.transpose() }
    }

    fn frobenius(&self) -> f64 {
        self.inner.frobenius()
    }

    fn nuclear_norm(&self) -> PyResult<f64> {
        numerics::nuclear_norm(&self.inner).map_err(to_py_err)
    }

    fn hadamard_abs_avg(&self, other: &PyMatrix) -> PyResult<f64> {
        self.inner.hadamard_abs_avg(&other.inner).map_err(to_py_err)
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows())
            .map(|i| self.inner.row(i).to_vec())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Matrix({}x{})", self.inner.rows(), self.inner.cols())
    }
}

/// Seeded generator; same seed, same stream.
#[pyclass(name = "Rng")]
struct PyRng {
    inner: numerics::Rng,
}

#[pymethods]
impl PyRng {
    #[new]
    fn new(seed: u64) -> Self {
        PyRng { inner: numerics::Rng::new(seed) }
    }

    fn gaussian(&mut self, rows: usize, cols: usize) -> PyMatrix {
        PyMatrix { inner: self.inner.sample_gaussian(rows, cols) }
    }

    fn kaiming_uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> PyMatrix {
        PyMatrix { inner: self.inner.sample_kaiming_uniform(rows, cols, fan_in) }
    }
}

#[pyfunction]
fn cholesky_solve(spd: &PyMatrix, rhs: &PyMatrix) -> PyResult<PyMatrix> {
    Ok(PyMatrix { inner: numerics::cholesky_solve(&spd.inner, &rhs.inner).map_err(to_py_err)? })
}

#[pyfunction]
fn importance(w: &PyMatrix, g: &PyMatrix, metric: &str) -> PyResult<f64> {
    allocate::importance(&w.inner, &g.inner, parse_metric(metric)?).map_err(to_py_err)
}

#[pyfunction]
fn advantages(importances: Vec<f64>) -> PyResult<Vec<f64>> {
    allocate::advantages(&importances).map_err(to_py_err)
}

#[pyfunction]
fn total_budget(layers: Vec<(usize, usize)>, r_ref: usize) -> f64 {
    allocate::total_budget(&layers, r_ref)
}

/// Ranks for (layer shapes, advantages) under (r_ref, r_min, r_max).
#[pyfunction]
#[pyo3(signature = (shapes, advantages, r_ref, r_min, r_max, metric="sensitivity"))]
fn allocate_ranks(
    shapes: Vec<(usize, usize)>,
    advantages: Vec<f64>,
    r_ref: usize,
    r_min: usize,
    r_max: usize,
    metric: &str,
) -> PyResult<Vec<usize>> {
    let cfg = AllocConfig::new(r_ref, r_min, r_max, parse_metric(metric)?).map_err(to_py_err)?;
    let layers: Vec<(usize, (usize, usize))> =
        shapes.iter().enumerate().map(|(i, &s)| (i, s)).collect();
    let importances = advantages.clone();
    let plan =
        allocate::allocate_ranks(&cfg, &layers, &importances, &advantages).map_err(to_py_err)?;
    Ok(plan.records.iter().map(|r| r.rank).collect())
}

#[pyfunction]
fn compress_init_b(a0: &PyMatrix, g: &PyMatrix) -> PyResult<PyMatrix> {
    Ok(PyMatrix { inner: init::compress_init_b(&a0.inner, &g.inner).map_err(to_py_err)? })
}

#[pyfunction]
fn xi(gamma: f64, alpha: f64, m: usize, r: usize, mode: &str) -> PyResult<f64> {
    Ok(init::xi(gamma, alpha, m, r, parse_mode(mode)?))
}

#[pyfunction]
fn reconstruction_error(
    a0: &PyMatrix,
    b0_scaled: &PyMatrix,
    g: &PyMatrix,
    gamma: f64,
    s: f64,
) -> PyResult<(f64, f64)> {
    init::reconstruction_error(&a0.inner, &b0_scaled.inner, &g.inner, gamma, s).map_err(to_py_err)
}

#[pyfunction]
fn adapter_scale(alpha: f64, r: usize, mode: &str) -> PyResult<f64> {
    Ok(parse_mode(mode)?.scale(alpha, r))
}

/// Run the full pipeline for a config text; returns a summary dict.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_text: &str, out_dir: &str) -> PyResult<Py<PyDict>> {
    let out = Path::new(out_dir);
    let manifest = gora::pipeline::run_pipeline_from_text(config_text, out).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("label", &manifest.label)?;
    d.set_item("seed", manifest.seed)?;
    d.set_item("final_loss", manifest.final_eval.loss)?;
    d.set_item("final_accuracy", manifest.final_eval.accuracy)?;
    d.set_item("gamma", manifest.init_report.gamma)?;
    d.set_item("probe_steps_used", manifest.probe_steps_used)?;
    d.set_item("host_peak_bytes", manifest.host_peak_bytes)?;
    d.set_item(
        "ranks",
        manifest
            .rank_plan
            .records
            .iter()
            .map(|r| (r.layer, r.rank))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("allocated_params", manifest.rank_plan.allocated_params())?;
    Ok(d.into())
}

/// Run a verification suite; returns (case, measured, bound, pass) rows.
#[pyfunction]
#[pyo3(signature = (suite, seed=20260301))]
fn run_verify(suite: &str, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let rows = verify::run_suite(suite, seed).map_err(to_py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (format!("{}/{}", r.suite, r.case), r.measured, r.bound, r.pass))
        .collect())
}

#[pymodule]
fn pygora(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_class::<PyRng>()?;
    m.add_function(wrap_pyfunction!(cholesky_solve, m)?)?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(advantages, m)?)?;
    m.add_function(wrap_pyfunction!(total_budget, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(compress_init_b, m)?)?;
    m.add_function(wrap_pyfunction!(xi, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_error, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_scale, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
