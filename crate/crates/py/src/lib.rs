//! Python bindings: configs, parameters, forward rollouts on linear and
//! Chandrasekhar problems, baselines, certification and preset runs.
//!
//! Vectors and matrices cross the boundary as lists (`list[float]`,
//! `list[list[float]]`, row-major).

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use r2n2::analysis::{algorithm_operator, certify_convergence, relative_performance, residual_reduction};
use r2n2::baselines::{gmres_cycle, gmres_restarted, nk_gmres, JVP_EPSILON};
use r2n2::experiments::{grad_check_suite, preset_config, run_experiment, PRESETS};
use r2n2::linalg::{self, DenseMatrix};
use r2n2::problems::{builtin_b_tilde, builtin_matrix_by_name, ChandrasekharProblem, LinearProblem, ProblemFunction};
use r2n2::superstructure::{fd_params_to_direct, rollout, ParamsFile};
use r2n2::{LayerMode, R2N2Config, R2N2Parameters};

fn to_py(e: r2n2::Error) -> PyErr {
    match e {
        r2n2::Error::Pole { .. } | r2n2::Error::NonFinite(_) | r2n2::Error::NoConvergence { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(to_py)
}

fn parse_mode(mode: &str) -> PyResult<LayerMode> {
    match mode {
        "direct" | "direct-eval" => Ok(LayerMode::DirectEval),
        "forward-diff" | "fd" => Ok(LayerMode::ForwardDiff),
        other => Err(PyValueError::new_err(format!("unknown layer mode `{other}`"))),
    }
}

/// Superstructure shape: depth `n`, scaling `h`, layer mode and `epsilon`.
#[pyclass(name = "Config", module = "r2n2", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: R2N2Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (n, layer_mode = "direct", h = 1.0, epsilon = 1e-8))]
    fn new(n: usize, layer_mode: &str, h: f64, epsilon: f64) -> PyResult<Self> {
        let inner = R2N2Config {
            n,
            h,
            layer_mode: parse_mode(layer_mode)?,
            epsilon,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn layer_mode(&self) -> &'static str {
        match self.inner.layer_mode {
            LayerMode::DirectEval => "direct",
            LayerMode::ForwardDiff => "forward-diff",
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(n={}, layer_mode='{}', h={}, epsilon={})",
            self.inner.n,
            self.layer_mode(),
            self.inner.h,
            self.inner.epsilon
        )
    }
}

/// Coefficient blocks `theta_layers` (ragged, row `j` has `j` entries) and
/// `theta_out` (`n` entries).
#[pyclass(name = "Params", module = "r2n2", skip_from_py_object)]
#[derive(Clone)]
pub struct PyParams {
    inner: R2N2Parameters,
}

#[pymethods]
impl PyParams {
    #[new]
    fn new(theta_layers: Vec<Vec<f64>>, theta_out: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: R2N2Parameters::new(theta_layers, theta_out).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(n: usize) -> Self {
        Self {
            inner: R2N2Parameters::zeros(n),
        }
    }

    /// Entries drawn from `U(−half_width, half_width)`.
    #[staticmethod]
    #[pyo3(signature = (n, seed, half_width = 0.1))]
    fn random(n: usize, seed: u64, half_width: f64) -> Self {
        let mut r = r2n2::rng::seeded(seed);
        Self {
            inner: R2N2Parameters::random_uniform(n, 1, 1, half_width, &mut r),
        }
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn theta_layers(&self) -> Vec<Vec<f64>> {
        self.inner.layers_at(0).to_vec()
    }

    #[getter]
    fn theta_out(&self) -> Vec<f64> {
        self.inner.output_at(0).to_vec()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.inner.to_flat()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Params JSON, including the config it was trained with.
    fn to_json(&self, config: &PyConfig) -> PyResult<String> {
        ParamsFile::new(&self.inner, &config.inner).to_json().map_err(to_py)
    }

    /// Parses Params JSON into `(Params, Config)`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<(PyParams, PyConfig)> {
        let (inner, cfg) = ParamsFile::from_json(text)
            .and_then(ParamsFile::into_parts)
            .map_err(to_py)?;
        Ok((PyParams { inner }, PyConfig { inner: cfg }))
    }

    fn __repr__(&self) -> String {
        format!("Params(n={}, len={})", self.inner.n(), self.inner.len())
    }
}

/// Residual norms `‖A x_k − b‖`, `k = 0..=steps`, of a rollout from `x0`
/// (zero when omitted).
#[pyfunction]
#[pyo3(signature = (params, config, a, b, steps, x0 = None))]
fn linear_rollout(
    params: &PyParams,
    config: &PyConfig,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    steps: usize,
    x0: Option<Vec<f64>>,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, bool)> {
    let p = LinearProblem::new(matrix(a)?, b).map_err(to_py)?;
    let x0 = x0.unwrap_or_else(|| vec![0.0; p.dim()]);
    let t = rollout(&params.inner, &config.inner, &p, &x0, steps).map_err(to_py)?;
    Ok((t.iterates, t.residual_norms, t.diverged))
}

/// Rollout on the discretized Chandrasekhar H-equation.
#[pyfunction]
fn chandrasekhar_rollout(
    params: &PyParams,
    config: &PyConfig,
    c: f64,
    x0: Vec<f64>,
    steps: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, bool)> {
    let p = ChandrasekharProblem::new(c, x0.len()).map_err(to_py)?;
    let t = rollout(&params.inner, &config.inner, &p, &x0, steps).map_err(to_py)?;
    Ok((t.iterates, t.residual_norms, t.diverged))
}

/// One GMRES cycle of dimension `n` from zero; returns `(x, residual_norm)`.
#[pyfunction]
fn gmres(a: Vec<Vec<f64>>, b: Vec<f64>, n: usize) -> PyResult<(Vec<f64>, f64)> {
    let a = matrix(a)?;
    let x0 = vec![0.0; b.len()];
    let g = gmres_cycle(|v: &[f64]| linalg::mat_vec(&a, v), &b, &x0, n).map_err(to_py)?;
    Ok((g.x, g.residual_norm))
}

/// Iterates of restarted GMRES(n) over `cycles` restarts.
#[pyfunction]
fn gmres_restart(a: Vec<Vec<f64>>, b: Vec<f64>, n: usize, cycles: usize) -> PyResult<Vec<Vec<f64>>> {
    let a = matrix(a)?;
    let x0 = vec![0.0; b.len()];
    gmres_restarted(&a, &b, &x0, n, cycles).map_err(to_py)
}

/// Newton–Krylov residual norms on a Chandrasekhar problem.
#[pyfunction]
fn newton_krylov(c: f64, x0: Vec<f64>, n: usize, steps: usize) -> PyResult<Vec<f64>> {
    let p = ChandrasekharProblem::new(c, x0.len()).map_err(to_py)?;
    Ok(nk_gmres(&p, &x0, n, JVP_EPSILON, steps).map_err(to_py)?.1)
}

/// Residual-reduction ratio of a one-pass rollout against GMRES of equal
/// dimension.
#[pyfunction]
fn linear_ratio(params: &PyParams, config: &PyConfig, a: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<f64> {
    let p = LinearProblem::new(matrix(a)?, b).map_err(to_py)?;
    let x0 = vec![0.0; p.dim()];
    let t = rollout(&params.inner, &config.inner, &p, &x0, 1).map_err(to_py)?;
    let dr = residual_reduction(&p, t.final_iterate()).map_err(to_py)?;
    let g = gmres_cycle(|v: &[f64]| linalg::mat_vec(&p.a, v), &p.b, &x0, config.inner.n).map_err(to_py)?;
    let dg = residual_reduction(&p, &g.x).map_err(to_py)?;
    relative_performance(dr, dg).map_err(to_py)
}

#[pyfunction]
fn builtin_matrix(name: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(builtin_matrix_by_name(name).map_err(to_py)?.to_rows())
}

#[pyfunction]
fn b_tilde() -> Vec<f64> {
    builtin_b_tilde()
}

/// `(norm, status, zeta)` of the algorithm operator on `A`.
#[pyfunction]
fn certify(params: &PyParams, config: &PyConfig, a: Vec<Vec<f64>>) -> PyResult<(f64, String, Vec<f64>)> {
    let op = algorithm_operator(&params.inner, &config.inner, &matrix(a)?).map_err(to_py)?;
    let cert = certify_convergence(&op).map_err(to_py)?;
    Ok((cert.norm, format!("{:?}", cert.status), op.zeta))
}

/// Direct-evaluation equivalent of forward-difference parameters.
#[pyfunction]
fn fd_to_direct(params: &PyParams, config: &PyConfig) -> PyResult<(PyParams, PyConfig)> {
    let (p, c) = fd_params_to_direct(&params.inner, &config.inner).map_err(to_py)?;
    Ok((PyParams { inner: p }, PyConfig { inner: c }))
}

/// Worst relative gap between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (count = 20, seed = 0))]
fn grad_check(py: Python<'_>, count: usize, seed: u64) -> PyResult<f64> {
    let cases = py.detach(|| grad_check_suite(count, seed)).map_err(to_py)?;
    Ok(cases.iter().map(|c| c.gap).fold(0.0, f64::max))
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.to_vec()
}

/// Runs a preset and returns `(params, config, summary, diverged)` for its
/// first training run.
#[pyfunction]
#[pyo3(signature = (name, seed = 0, epochs = None, threads = None))]
fn run_preset(
    py: Python<'_>,
    name: &str,
    seed: u64,
    epochs: Option<usize>,
    threads: Option<usize>,
) -> PyResult<(PyParams, PyConfig, BTreeMap<String, f64>, bool)> {
    let mut cfg = preset_config(name).map_err(to_py)?;
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    cfg.training.threads = threads;
    let report = py.detach(|| run_experiment(&cfg)).map_err(to_py)?;
    let (_, run) = report
        .runs
        .first()
        .ok_or_else(|| PyRuntimeError::new_err("preset produced no training run"))?;
    Ok((
        PyParams {
            inner: run.params.clone(),
        },
        PyConfig { inner: run.config },
        report.summary.clone(),
        report.diverged(),
    ))
}

/// Default config of a preset as JSON.
#[pyfunction]
fn preset_json(name: &str) -> PyResult<String> {
    let cfg = preset_config(name).map_err(to_py)?;
    serde_json::to_string_pretty(&cfg).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "r2n2")]
fn r2n2_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(linear_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(chandrasekhar_rollout, m)?)?;
    m.add_function(wrap_pyfunction!(gmres, m)?)?;
    m.add_function(wrap_pyfunction!(gmres_restart, m)?)?;
    m.add_function(wrap_pyfunction!(newton_krylov, m)?)?;
    m.add_function(wrap_pyfunction!(linear_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(b_tilde, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(fd_to_direct, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(run_preset, m)?)?;
    m.add_function(wrap_pyfunction!(preset_json, m)?)?;
    m.add("DIVERGENCE_THRESHOLD", r2n2::superstructure::DIVERGENCE_THRESHOLD)?;
    Ok(())
}
