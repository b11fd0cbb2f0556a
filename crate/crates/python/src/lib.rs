//! Python bindings. Arrays cross the boundary as nested lists (anything
//! sequence-like is accepted, including numpy arrays).

use std::path::PathBuf;

use muda::analysis::{disagreement_rate as rate, squared_disagreement_divergence, sup_vs_expectation};
use muda::checkpoint::Checkpoint;
use muda::config::ExperimentConfig;
use muda::data::{make_shifted_blobs, make_two_moons, DomainDataset};
use muda::experiment::{run_experiment, write_artifacts, RunOptions, SeedSource};
use muda::ndcore::Tensor;
use muda::selftest::{gradient_suite, identity_suite};
use muda::trainer::evaluate as evaluate_net;
use muda::uncertainty::{pairwise_identity_check, predictive_variance as estimate, DivergenceNorm, McEnsemble};
use muda::{MudaError, Network};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(
    muda_py,
    ConfigError,
    PyValueError,
    "Invalid configuration or arguments."
);
create_exception!(muda_py, RuntimeFailure, PyRuntimeError, "A run or computation failed.");

fn to_py(err: MudaError) -> PyErr {
    if err.is_config() {
        ConfigError::new_err(err.to_string())
    } else {
        RuntimeFailure::new_err(err.to_string())
    }
}

type Matrix = Vec<Vec<f64>>;

fn matrix(rows: Matrix) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(ConfigError::new_err("expected a non-empty rectangular 2-d array"));
    }
    let n = rows.len();
    Tensor::new(vec![n, cols], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn ensemble(scores: Vec<Matrix>) -> PyResult<McEnsemble> {
    let passes = scores.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    McEnsemble::from_passes(&passes).map_err(to_py)
}

fn norm(name: &str) -> PyResult<DivergenceNorm> {
    match name {
        "std_l2" => Ok(DivergenceNorm::StdL2),
        "var_l2" => Ok(DivergenceNorm::VarL2),
        other => Err(ConfigError::new_err(format!(
            "unknown norm {other:?}, expected std_l2 or var_l2"
        ))),
    }
}

fn dataset_pair(ds: DomainDataset) -> (Matrix, Vec<usize>) {
    let labels = ds.labels().map(<[usize]>::to_vec).unwrap_or_default();
    (rows(ds.inputs()), labels)
}

fn json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Feature extractor plus classifier, as produced by training.
#[pyclass(name = "Network", module = "muda_py")]
pub struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    /// The toy 5-layer, 15-unit network with dropout after the fourth layer.
    #[new]
    #[pyo3(signature = (seed = 0, input_dim = 2, num_classes = 2))]
    fn new(seed: u64, input_dim: usize, num_classes: usize) -> PyResult<Self> {
        let spec = muda::NetworkSpec::toy(input_dim, num_classes);
        Ok(PyNetwork {
            inner: Network::new(spec, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(path).and_then(|c| c.network()).map_err(to_py)?;
        Ok(PyNetwork { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::capture(&self.inner, 0).save(path).map_err(to_py)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.spec().input_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.spec().num_classes
    }

    /// Softmax scores with dropout off and batch-norm running statistics.
    fn scores(&self, x: Matrix) -> PyResult<Matrix> {
        Ok(rows(&self.inner.scores(&matrix(x)?).map_err(to_py)?))
    }

    fn predict(&self, x: Matrix) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(x)?).map_err(to_py)
    }

    /// Accuracy, per-class recall and its mean on labeled data.
    fn evaluate<'py>(&self, py: Python<'py>, x: Matrix, y: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
        let k = self.inner.spec().num_classes;
        let ds = DomainDataset::new(matrix(x)?, Some(y), "python", k).map_err(to_py)?;
        let eval = evaluate_net(&self.inner, &ds).map_err(to_py)?;
        json(py, &serde_json::to_string(&eval).expect("evaluation serializes"))
    }

    fn __repr__(&self) -> String {
        let s = self.inner.spec();
        format!("Network(input_dim={}, num_classes={})", s.input_dim, s.num_classes)
    }
}

/// `(x, y)` for one two-moons domain rotated by `rotation_deg`.
#[pyfunction]
#[pyo3(signature = (n = 1000, noise_std = 0.1, rotation_deg = 0.0, seed = 0))]
fn two_moons(n: usize, noise_std: f64, rotation_deg: f64, seed: u64) -> PyResult<(Matrix, Vec<usize>)> {
    Ok(dataset_pair(
        make_two_moons(n, noise_std, rotation_deg, seed).map_err(to_py)?,
    ))
}

/// `((xs, ys), (xt, yt))`: blobs and the same points translated by `shift`.
#[pyfunction]
#[pyo3(signature = (n, k, shift, seed = 0))]
#[allow(clippy::type_complexity)]
fn shifted_blobs(
    n: usize,
    k: usize,
    shift: Vec<f64>,
    seed: u64,
) -> PyResult<((Matrix, Vec<usize>), (Matrix, Vec<usize>))> {
    let (s, t) = make_shifted_blobs(n, k, &shift, seed).map_err(to_py)?;
    Ok((dataset_pair(s), dataset_pair(t)))
}

/// Per-class variance `[N][K]`, per-sample loss and mean loss of an
/// ensemble given as `[M][N][K]` scores.
#[pyfunction]
#[pyo3(signature = (scores, norm_name = "std_l2"))]
fn predictive_variance(scores: Vec<Matrix>, norm_name: &str) -> PyResult<(Matrix, Vec<f64>, f64)> {
    let est = estimate(&ensemble(scores)?, norm(norm_name)?).map_err(to_py)?;
    Ok((rows(&est.variance), est.per_sample_loss, est.mean_loss))
}

#[pyfunction]
fn disagreement_rate(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    rate(&a, &b).map_err(to_py)
}

/// Supremum, expectation and spread of pairwise hard-label disagreement.
#[pyfunction]
fn disagreement_report<'py>(py: Python<'py>, scores: Vec<Matrix>) -> PyResult<Bound<'py, PyDict>> {
    let e = ensemble(scores)?;
    let r = sup_vs_expectation(&e);
    let d = PyDict::new(py);
    d.set_item("sup", r.supremum)?;
    d.set_item("exp", r.expectation)?;
    d.set_item("std", r.std)?;
    d.set_item("ci95_upper", r.ci95_upper())?;
    d.set_item("pairwise_rates", r.pairwise_rates)?;
    d.set_item("squared_divergence", squared_disagreement_divergence(&e))?;
    d.set_item("identity_gap", pairwise_identity_check(&e).gap)?;
    Ok(d)
}

/// Runs pretraining, the source-only baseline and MUDA from a TOML config.
/// Returns `(summary, networks)` with networks keyed by phase. Artifacts are
/// written when `out` is given.
#[pyfunction]
#[pyo3(signature = (config_toml, seed = None, threads = 1, out = None))]
fn train<'py>(
    py: Python<'py>,
    config_toml: &str,
    seed: Option<u64>,
    threads: usize,
    out: Option<PathBuf>,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyDict>)> {
    let cfg = ExperimentConfig::from_toml(config_toml).map_err(to_py)?;
    let opts = RunOptions {
        seed: seed.map(|s| (s, SeedSource::Flag)),
        threads,
    };
    let outcome = py
        .detach(|| {
            let outcome = run_experiment(&cfg, &opts)?;
            if let Some(dir) = &out {
                write_artifacts(&outcome, dir)?;
            }
            Ok::<_, MudaError>(outcome)
        })
        .map_err(to_py)?;
    let summary = json(
        py,
        &serde_json::to_string(&outcome.summary).expect("summary serializes"),
    )?;
    let nets = PyDict::new(py);
    for (name, net) in [
        ("pretrained", outcome.pretrained_net),
        ("source_only", outcome.source_only_net),
        ("muda", outcome.muda_net),
    ] {
        nets.set_item(name, PyNetwork { inner: net })?;
    }
    Ok((summary, nets))
}

/// Worst finite-difference relative error over the gradient suite and the
/// worst pairwise-identity gap.
#[pyfunction]
#[pyo3(signature = (instances = 20, seed = 0))]
fn selftest(py: Python<'_>, instances: usize, seed: u64) -> PyResult<(f64, f64)> {
    py.detach(|| {
        let grads = gradient_suite(instances, seed)?;
        Ok::<_, MudaError>((grads.max_rel_error(), identity_suite(100, seed)?))
    })
    .map_err(to_py)
}

#[pymodule]
fn muda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("RuntimeFailure", m.py().get_type::<RuntimeFailure>())?;
    m.add_function(wrap_pyfunction!(two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(shifted_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_variance, m)?)?;
    m.add_function(wrap_pyfunction!(disagreement_rate, m)?)?;
    m.add_function(wrap_pyfunction!(disagreement_report, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
