//! Python bindings: configs, datasets, leave-one-domain-out evaluation,
//! the quadratic localization demo and the built-in checks.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ttso_core::bundle::{run_localization, QuadraticBundle};
use ttso_core::config::{Method, RunConfig};
use ttso_core::data::DomainDataset;
use ttso_core::error::TtsoError;
use ttso_core::evalbench::{run_lodo, LodoReport};

fn to_py(e: TtsoError) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else if matches!(e, TtsoError::Io { .. }) {
        PyOSError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_method(s: &str) -> PyResult<Method> {
    match s {
        "erm" => Ok(Method::Erm),
        "group_dro" | "groupdro" => Ok(Method::GroupDro),
        "ttso" => Ok(Method::Ttso),
        _ => Err(PyValueError::new_err(format!("unknown method `{s}`"))),
    }
}

#[pyclass(name = "RunConfig", module = "ttso")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn example() -> Self {
        Self {
            inner: RunConfig::example(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
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
    fn eval_seeds(&self) -> Vec<u64> {
        self.inner.eval.seeds.clone()
    }

    #[setter]
    fn set_eval_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.eval.seeds = seeds;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn sla_iterations(&self) -> usize {
        self.inner.sla.iterations
    }

    #[setter]
    fn set_sla_iterations(&mut self, n: usize) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.sla.iterations = n;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn experiment_hash(&self) -> String {
        self.inner.experiment_hash()
    }

    fn dataset(&self) -> PyResult<PyDataset> {
        self.inner.dataset().map(|inner| PyDataset { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(seed={}, hash={})",
            self.inner.seed,
            self.inner.experiment_hash()
        )
    }
}

#[pyclass(name = "Dataset", module = "ttso")]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn domain_ids(&self) -> Vec<String> {
        self.inner.domains.iter().map(|d| d.id.clone()).collect()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.inner.window_len
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features
    }

    fn __len__(&self) -> usize {
        self.inner.n_domains()
    }

    /// `(windows, labels)` of domain `i`; each window is flattened
    /// time-major.
    fn domain(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
        let d = self
            .inner
            .domains
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("domain index {i} out of range")))?;
        Ok((d.windows.clone(), d.labels.clone()))
    }
}

#[pyclass(name = "LodoReport", module = "ttso")]
struct PyLodoReport {
    inner: LodoReport,
}

#[pymethods]
impl PyLodoReport {
    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn domains(&self) -> Vec<String> {
        self.inner.domains.clone()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean
    }

    #[getter]
    fn std(&self) -> f64 {
        self.inner.std
    }

    #[getter]
    fn mean_per_domain(&self) -> Vec<f64> {
        self.inner.mean_per_domain.clone()
    }

    /// `(seed, per-domain accuracies)` for every replicate.
    #[getter]
    fn rows(&self) -> Vec<(u64, Vec<f64>)> {
        self.inner.rows.iter().map(|r| (r.seed, r.accuracies.clone())).collect()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Leave-one-domain-out evaluation of one method on the config's dataset.
/// The GIL is released while training runs.
#[pyfunction]
#[pyo3(signature = (config, method, seeds=None))]
fn lodo(py: Python<'_>, config: &PyRunConfig, method: &str, seeds: Option<Vec<u64>>) -> PyResult<PyLodoReport> {
    let m = parse_method(method)?;
    let cfg = config.inner.clone();
    let seeds = seeds.unwrap_or_else(|| cfg.eval.seeds.clone());
    let run = py.allow_threads(move || {
        let ds = cfg.dataset()?;
        run_lodo(&ds, m, &cfg, &seeds, None)
    });
    run.map(|r| PyLodoReport { inner: r.report }).map_err(to_py)
}

/// Localization epochs on a random convex quadratic; one dict per epoch.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (n=4, k=3, d=3, seed=0, epochs=12, eps=1e-6, lam=1.0))]
fn toy_quadratic(
    py: Python<'_>,
    n: usize,
    k: usize,
    d: usize,
    seed: u64,
    epochs: usize,
    eps: f64,
    lam: f64,
) -> PyResult<Vec<PyObject>> {
    let b = QuadraticBundle::random(n, k, d, seed).map_err(to_py)?;
    let log = run_localization(&b, eps, lam, epochs, 1e-10).map_err(to_py)?;
    log.iter()
        .map(|e| {
            let dict = pyo3::types::PyDict::new(py);
            dict.set_item("epoch", e.epoch)?;
            dict.set_item("n_planes", e.n_planes)?;
            dict.set_item("f_opt", e.f_opt)?;
            dict.set_item("f1_opt", e.f1_opt)?;
            dict.set_item("h", e.h)?;
            dict.set_item("grad_norm", e.grad_norm)?;
            Ok(dict.into_any().unbind())
        })
        .collect()
}

/// Built-in gradient, convexity and plane checks as `(name, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn selftest(seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let checks = ttso_core::selftest::run(seed).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn simplex_project(v: Vec<f64>) -> PyResult<Vec<f64>> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(PyValueError::new_err("expected a non-empty finite vector"));
    }
    Ok(ttso_core::group::simplex_project(&v))
}

#[pymodule]
fn ttso(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyLodoReport>()?;
    m.add_function(wrap_pyfunction!(lodo, m)?)?;
    m.add_function(wrap_pyfunction!(toy_quadratic, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_project, m)?)?;
    Ok(())
}
