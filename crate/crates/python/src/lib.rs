//! Python bindings: run configuration, pipeline stages, the synthetic wake and
//! the spectral tools. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use latentflow::config::RunConfig;
use latentflow::spectral::{self, PodMethod, SnapshotMatrix, Window};
use latentflow::wake::{PressureSample, WakeConfig, WakeModel};
use latentflow::{eval, io, nn, p2z, pipeline, vae, Error};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Dependency(_) => PyFileNotFoundError::new_err(msg),
        Error::Diverged { .. } | Error::CheckpointMismatch(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (_, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let m = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]))
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Run configuration. Defaults are the desk settings.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// SHA-256 of the config without its output path.
    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.paths.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.paths.out = out;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, out={:?}, hash={})", self.inner.seed, self.inner.paths.out, &self.inner.hash()[..12])
    }
}

fn out_dir(cfg: &PyRunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.inner.paths.out.clone())
}

/// Writes the low-rate pairs and the high-rate pressure record; returns their lengths.
#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn generate(py: Python<'_>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<(usize, usize)> {
    let out = out_dir(cfg, out);
    let (low, high) = py.detach(|| pipeline::generate(&cfg.inner, &out)).map_err(py_err)?;
    Ok((low.len(), high.len()))
}

/// Stage 1. Returns the per-epoch trace.
#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn train_vae<'py>(py: Python<'py>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let trace = py.detach(|| pipeline::train_vae(&cfg.inner, &out)).map_err(py_err)?;
    to_py(py, &trace)
}

/// Stage 2. Returns the per-epoch trace.
#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn train_p2z<'py>(py: Python<'py>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let trace = py.detach(|| pipeline::train_p2z(&cfg.inner, &out)).map_err(py_err)?;
    to_py(py, &trace)
}

/// Writes the inferred high-rate fields; returns the snapshot count.
#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn infer(py: Python<'_>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<usize> {
    let out = out_dir(cfg, out);
    py.detach(|| pipeline::infer(&cfg.inner, &out)).map(|s| s.len()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (cfg, out=None, input=None))]
fn analyze_spod<'py>(
    py: Python<'py>,
    cfg: &PyRunConfig,
    out: Option<PathBuf>,
    input: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let peaks = py.detach(|| pipeline::analyze_spod(&cfg.inner, &out, input.as_deref())).map_err(py_err)?;
    to_py(py, &peaks)
}

#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn match_lift<'py>(py: Python<'py>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let m = py.detach(|| pipeline::match_lift(&cfg.inner, &out)).map_err(py_err)?;
    to_py(py, &m)
}

#[pyfunction]
#[pyo3(signature = (cfg, out=None, input=None))]
fn evaluate<'py>(
    py: Python<'py>,
    cfg: &PyRunConfig,
    out: Option<PathBuf>,
    input: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let s = py.detach(|| pipeline::evaluate(&cfg.inner, &out, input.as_deref())).map_err(py_err)?;
    to_py(py, &s)
}

/// Every stage, then the manifest, which is returned.
#[pyfunction]
#[pyo3(signature = (cfg, out=None))]
fn run_all<'py>(py: Python<'py>, cfg: &PyRunConfig, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let out = out_dir(cfg, out);
    let m = py.detach(|| pipeline::run_all(&cfg.inner, &out)).map_err(py_err)?;
    to_py(py, &m)
}

/// Analytic vortex street with wall-pressure taps.
#[pyclass(name = "WakeModel")]
struct PyWakeModel {
    inner: WakeModel,
}

#[pymethods]
impl PyWakeModel {
    #[new]
    #[pyo3(signature = (cfg=None))]
    fn new(cfg: Option<&PyRunConfig>) -> PyResult<Self> {
        let wake = cfg.map_or_else(WakeConfig::default, |c| c.inner.wake.clone());
        WakeModel::new(&wake).map(|inner| Self { inner }).map_err(py_err)
    }

    /// `(u, v)` at time `t`, each a row-major `h × w` list of rows.
    fn field(&self, t: f64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let s = self.inner.field(t);
        let rows = |c: &[f32]| c.chunks(s.w).map(<[f32]>::to_vec).collect();
        (rows(&s.u), rows(&s.v))
    }

    /// Noise-free tap pressure coefficients at time `t`.
    fn cp(&self, t: f64) -> Vec<f64> {
        self.inner.cp_clean(t)
    }

    /// Lift coefficient of the noise-free taps at time `t`.
    fn lift(&self, t: f64) -> PyResult<f64> {
        let taps = self.inner.config().taps();
        let p = PressureSample { t, cp: self.inner.cp_clean(t) };
        eval::lift_coefficient(&p, &taps.weights, &taps.normal_y).map_err(py_err)
    }

    #[getter]
    fn shed_freq(&self) -> f64 {
        self.inner.config().shed_freq
    }
}

/// Snapshot POD of `rows` (one list per time step). Returns eigenvalues,
/// modes as columns, coefficients per snapshot and cumulative energy.
#[pyfunction]
#[pyo3(signature = (rows, r, method="auto"))]
fn pod<'py>(py: Python<'py>, rows: Vec<Vec<f64>>, r: usize, method: &str) -> PyResult<Bound<'py, PyDict>> {
    let method = match method {
        "auto" => PodMethod::Auto,
        "snapshot" => PodMethod::Snapshot,
        "direct" => PodMethod::Direct,
        other => return Err(PyValueError::new_err(format!("unknown POD method {other:?}"))),
    };
    let x = SnapshotMatrix::from_rows(&rows, 1.0).map_err(py_err)?;
    let res = spectral::pod_decompose(&x, r, method).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("eigenvalues", res.eigenvalues)?;
    d.set_item("modes", columns(&res.modes))?;
    let coeffs: Vec<Vec<f64>> = res.coefficients.row_iter().map(|r| r.iter().copied().collect()).collect();
    d.set_item("coefficients", coeffs)?;
    d.set_item("cumulative_energy", res.cumulative_energy)?;
    Ok(d)
}

/// SPOD of `rows` (time × points). Returns frequencies and per-frequency eigenvalues.
#[pyfunction]
#[pyo3(signature = (rows, dt, n_dft, overlap, n_modes, window="hamming"))]
fn spod<'py>(
    py: Python<'py>,
    rows: Vec<Vec<f64>>,
    dt: f64,
    n_dft: usize,
    overlap: usize,
    n_modes: usize,
    window: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let window = match window {
        "hamming" => Window::Hamming,
        "rectangular" => Window::Rectangular,
        other => return Err(PyValueError::new_err(format!("unknown window {other:?}"))),
    };
    let x = matrix(&rows)?;
    let res = py
        .detach(|| spectral::spod_decompose(&x, dt, n_dft, overlap, n_modes, window))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("frequencies", &res.frequencies)?;
    d.set_item("eigenvalues", &res.eigenvalues)?;
    d.set_item("n_blocks", res.n_blocks)?;
    d.set_item("peaks", spectral::peak_frequencies(&res, 3))?;
    Ok(d)
}

#[pyfunction]
fn block_count(t: usize, n_dft: usize, overlap: usize) -> PyResult<usize> {
    spectral::block_count(t, n_dft, overlap).map_err(py_err)
}

#[pyfunction]
fn strouhal(f: f64, d: f64, u: f64) -> PyResult<f64> {
    spectral::strouhal(f, d, u).map_err(py_err)
}

/// `Cp = p / (½ ρ u²)`.
#[pyfunction]
#[pyo3(signature = (p, rho=eval::AIR_DENSITY, u=eval::REFERENCE_VELOCITY))]
fn pressure_to_cp(p: f64, rho: f64, u: f64) -> f64 {
    let stats = eval::NormalizationStats { rho, u_ref: u, ..Default::default() };
    eval::pressure_to_cp(p, &stats)
}

/// Closed-form KL to the standard normal for one diagonal Gaussian.
#[pyfunction]
fn kl_divergence(mu: Vec<f64>, logvar: Vec<f64>) -> PyResult<f64> {
    nn::kl_divergence(&mu, &logvar, mu.len()).map_err(py_err)
}

#[pyfunction]
fn beta_schedule(epo: usize, epochs: usize, beta_end: f64) -> PyResult<f64> {
    vae::beta_schedule(epo, epochs, beta_end).map_err(py_err)
}

#[pyfunction]
fn alpha_schedule(epo: usize, epos_p2z: usize, alpha_end: f64) -> PyResult<f64> {
    p2z::alpha_schedule(epo, epos_p2z, alpha_end).map_err(py_err)
}

/// Low-rate samples whose lift is within `tol` of the high-rate maximum, closest first.
#[pyfunction]
fn match_by_lift<'py>(py: Python<'py>, cl_high: Vec<f64>, cl_low: Vec<f64>, tol: f64) -> PyResult<Bound<'py, PyAny>> {
    let m = eval::match_by_lift(&cl_high, &cl_low, tol).map_err(py_err)?;
    to_py(py, &m)
}

/// A field file as `{"dt", "t0", "times", "u", "v"}`; `u` and `v` are
/// per-snapshot flat row-major lists with `h` and `w` alongside.
#[pyfunction]
fn read_field_file<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let s = io::read_field_file(&path).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("dt", s.dt)?;
    d.set_item("t0", s.t0)?;
    d.set_item("h", s.snapshots.first().map_or(0, |x| x.h))?;
    d.set_item("w", s.snapshots.first().map_or(0, |x| x.w))?;
    d.set_item("times", s.snapshots.iter().map(|x| x.t).collect::<Vec<_>>())?;
    d.set_item("u", s.snapshots.iter().map(|x| x.u.clone()).collect::<Vec<_>>())?;
    d.set_item("v", s.snapshots.iter().map(|x| x.v.clone()).collect::<Vec<_>>())?;
    Ok(d)
}

/// A pressure CSV as `(times, cp_rows)`.
#[pyfunction]
fn read_pressure_file(path: PathBuf) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = io::read_pressure_file(&path).map_err(py_err)?;
    Ok(s.into_iter().map(|p| (p.t, p.cp)).unzip())
}

#[pymodule]
#[pyo3(name = "latentflow")]
fn latentflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyWakeModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_p2z, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_spod, m)?)?;
    m.add_function(wrap_pyfunction!(match_lift, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(pod, m)?)?;
    m.add_function(wrap_pyfunction!(spod, m)?)?;
    m.add_function(wrap_pyfunction!(block_count, m)?)?;
    m.add_function(wrap_pyfunction!(strouhal, m)?)?;
    m.add_function(wrap_pyfunction!(pressure_to_cp, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(beta_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(match_by_lift, m)?)?;
    m.add_function(wrap_pyfunction!(read_field_file, m)?)?;
    m.add_function(wrap_pyfunction!(read_pressure_file, m)?)?;
    Ok(())
}
