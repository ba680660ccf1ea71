//! Python bindings. Matrices cross the boundary as lists of rows; reports come
//! back as dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use lamp_core::analysis;
use lamp_core::backbone::FrozenBackbone;
use lamp_core::checkpoint;
use lamp_core::config::{run_experiment, ExperimentConfig};
use lamp_core::error::LampError;
use lamp_core::matrix::Matrix;
use lamp_core::prompt::{self, DecomposedPrompt, ReconstructionMode, SourcePrompt};
use lamp_core::svd as linalg;
use lamp_core::trainer::LoopOptions;

type Rows = Vec<Vec<f64>>;

fn py_err(e: LampError) -> PyErr {
    match e {
        LampError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(py_err)
}

fn mode(name: &str) -> PyResult<ReconstructionMode> {
    match name {
        "verbatim" => Ok(ReconstructionMode::Verbatim),
        "balanced" => Ok(ReconstructionMode::Balanced),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import_bound("json")?.call_method1("loads", (text,))?.unbind())
}

/// A trained or freshly decomposed soft prompt.
#[pyclass(module = "lamp_py")]
#[derive(Clone)]
struct SoftPrompt {
    inner: prompt::SoftPrompt,
}

#[pymethods]
impl SoftPrompt {
    /// Decomposes `source` (l rows of width d) and keeps the top `r` singular triplets.
    #[staticmethod]
    #[pyo3(signature = (source, r, mode = "verbatim", pool_block = 1, seed = 0))]
    fn lamp(source: Rows, r: usize, mode: &str, pool_block: usize, seed: u64) -> PyResult<Self> {
        let source = SourcePrompt { tokens: matrix(&source)? };
        let pool = if pool_block == 1 {
            prompt::PoolConfig::none()
        } else {
            prompt::PoolConfig::average(pool_block)
        };
        let inner = prompt::SoftPrompt::lamp(&source, r, self::mode(mode)?, pool, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method().name()
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.inner.trainable_params()
    }

    #[getter]
    fn rows_fed(&self) -> usize {
        self.inner.rows_fed()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// The l × d prompt before pooling.
    fn reconstructed(&self) -> PyResult<Rows> {
        Ok(self.inner.reconstructed().map_err(py_err)?.to_rows())
    }

    /// The rows actually fed to the model.
    fn materialize(&self) -> PyResult<Rows> {
        Ok(self.inner.materialize().map_err(py_err)?.to_rows())
    }

    fn __repr__(&self) -> String {
        format!(
            "SoftPrompt(method={:?}, l={}, d={}, trainable_params={})",
            self.inner.method().name(),
            self.inner.prompt_len(),
            self.inner.width(),
            self.inner.trainable_params()
        )
    }
}

/// The frozen transformer a prompt is trained against.
#[pyclass(module = "lamp_py")]
struct Backbone {
    inner: FrozenBackbone,
}

#[pymethods]
impl Backbone {
    /// Builds the backbone described by an experiment config (JSON text); defaults when omitted.
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(text) => ExperimentConfig::from_json(text).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self {
            inner: FrozenBackbone::new(cfg.backbone).map_err(py_err)?,
        })
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn weight_count(&self) -> usize {
        self.inner.weight_count()
    }

    /// Class logits for `token_ids` with `prompt` rows prepended.
    fn forward(&self, prompt: Rows, token_ids: Vec<usize>) -> PyResult<Vec<f64>> {
        let input = self.inner.encode_input(&token_ids).map_err(py_err)?;
        self.inner.forward(&matrix(&prompt)?, &input).map_err(py_err)
    }
}

#[pyfunction]
fn lamp_param_count(l: usize, d: usize, r: usize) -> usize {
    prompt::lamp_param_count(l, d, r)
}

#[pyfunction]
fn vanilla_pt_param_count(l: usize, d: usize) -> usize {
    prompt::vanilla_pt_param_count(l, d)
}

#[pyfunction]
#[pyo3(signature = (l, d, r, p = 1, m = 0))]
fn cost_report(py: Python<'_>, l: usize, d: usize, r: usize, p: usize, m: usize) -> PyResult<PyObject> {
    to_py(py, &analysis::cost_report(l, d, r, p, m).map_err(py_err)?)
}

/// Returns `(u, s, v)` with `a = u · diag(s) · vᵀ`.
#[pyfunction]
fn svd(a: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let s = linalg::svd(&matrix(&a)?).map_err(py_err)?;
    Ok((s.u.to_rows(), s.s, s.v.to_rows()))
}

#[pyfunction]
#[pyo3(signature = (a, rel_tol = analysis::RANK_TOLERANCE))]
fn numerical_rank(a: Rows, rel_tol: f64) -> PyResult<usize> {
    linalg::numerical_rank(&matrix(&a)?, rel_tol).map_err(py_err)
}

/// Sum of the r outer products `M[:, k] ⊗ I[k, :]`.
#[pyfunction]
fn compressed_outer_product(m: Rows, i: Rows) -> PyResult<Rows> {
    Ok(prompt::compressed_outer_product(&matrix(&m)?, &matrix(&i)?).map_err(py_err)?.to_rows())
}

#[pyfunction]
#[pyo3(signature = (u, q, v, mode = "verbatim"))]
fn reconstruct(u: Rows, q: Vec<f64>, v: Rows, mode: &str) -> PyResult<Rows> {
    let dp = DecomposedPrompt::new(matrix(&u)?, q, matrix(&v)?).map_err(py_err)?;
    Ok(prompt::reconstruct(&dp, self::mode(mode)?).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn average_pool(c: Rows, p: usize) -> PyResult<Rows> {
    Ok(prompt::average_pool(&matrix(&c)?, p).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn dispersion_stats(py: Python<'_>, tokens: Rows) -> PyResult<PyObject> {
    to_py(py, &analysis::dispersion_stats(&matrix(&tokens)?).map_err(py_err)?)
}

/// The default experiment config as JSON text.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json()
}

/// Trains a prompt; returns `(metrics, prompt, cost)`.
#[pyfunction]
fn train(py: Python<'_>, config_json: &str) -> PyResult<(PyObject, SoftPrompt, PyObject)> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    let out = py.allow_threads(|| run_experiment(&cfg, LoopOptions::default())).map_err(py_err)?;
    Ok((
        to_py(py, &out.log.records)?,
        SoftPrompt { inner: out.prompt },
        to_py(py, &out.cost)?,
    ))
}

#[pymodule]
fn lamp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<SoftPrompt>()?;
    m.add_class::<Backbone>()?;
    m.add_function(wrap_pyfunction!(lamp_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(vanilla_pt_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(numerical_rank, m)?)?;
    m.add_function(wrap_pyfunction!(compressed_outer_product, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(average_pool, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion_stats, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
