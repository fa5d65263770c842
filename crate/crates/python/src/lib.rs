//! Python bindings over the pipeline commands. Every command takes the same
//! `config_path` and `overrides` as the command line.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;
use vicha::pipeline;
use vicha::train::RunConfig;

fn to_py_err(e: vicha::Error) -> PyErr {
    match e {
        vicha::Error::MissingInput(_) => PyFileNotFoundError::new_err(e.to_string()),
        vicha::Error::Config(_) | vicha::Error::Usage(_) | vicha::Error::Filter(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn resolve(config_path: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<RunConfig> {
    RunConfig::load(config_path.as_deref(), &overrides.unwrap_or_default()).map_err(to_py_err)
}

/// Converts through JSON so results arrive as plain dicts and lists.
fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Resolved configuration as TOML.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=None))]
fn config(config_path: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<String> {
    Ok(resolve(config_path, overrides)?.to_toml())
}

/// Writes a synthetic dataset; returns the number of pairs.
#[pyfunction]
#[pyo3(signature = (n, config_path=None, overrides=None))]
fn generate(
    n: usize,
    config_path: Option<PathBuf>,
    overrides: Option<Vec<String>>,
) -> PyResult<usize> {
    let config = resolve(config_path, overrides)?;
    Ok(pipeline::generate(&config, n).map_err(to_py_err)?.len())
}

/// Returns the corpus size.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=None))]
fn build_corpus(config_path: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<usize> {
    let config = resolve(config_path, overrides)?;
    Ok(pipeline::build_corpus_command(&config)
        .map_err(to_py_err)?
        .len())
}

/// Returns the number of cached embeddings.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=None))]
fn embed(config_path: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<usize> {
    let config = resolve(config_path, overrides)?;
    pipeline::embed_command(&config).map_err(to_py_err)
}

/// Returns one concept record per image.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=None))]
fn select_concepts<'py>(
    py: Python<'py>,
    config_path: Option<PathBuf>,
    overrides: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = resolve(config_path, overrides)?;
    let sets = py
        .detach(|| pipeline::select_concepts_command(&config))
        .map_err(to_py_err)?;
    to_python(py, &sets)
}

/// Trains to `training.steps`; returns the run summary.
#[pyfunction]
#[pyo3(signature = (config_path=None, overrides=None, resume=false))]
fn pretrain<'py>(
    py: Python<'py>,
    config_path: Option<PathBuf>,
    overrides: Option<Vec<String>>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let config = resolve(config_path, overrides)?;
    let summary = py
        .detach(|| pipeline::pretrain_command(&config, resume))
        .map_err(to_py_err)?;
    to_python(py, &summary)
}

/// Training log records of a run.
#[pyfunction]
fn read_log<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    to_python(py, &pipeline::read_log(&path).map_err(to_py_err)?)
}

/// Recall at 1, 5 and 10 in both directions, plus rsum.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, m=16, concepts=None))]
fn eval_retrieval<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    m: usize,
    concepts: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| {
            pipeline::eval_retrieval_command(&checkpoint, &manifest, concepts.as_deref(), m, None)
        })
        .map_err(to_py_err)?;
    to_python(py, &report.result)
}

/// Proposals ranked by relevance, best first.
#[pyfunction]
#[pyo3(signature = (checkpoint, image, query, proposals, layer=2))]
fn ground<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    image: PathBuf,
    query: String,
    proposals: PathBuf,
    layer: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let map = py
        .detach(|| {
            pipeline::ground_command(
                &checkpoint,
                &image,
                &query,
                &proposals,
                layer,
                None::<&Path>,
            )
        })
        .map_err(to_py_err)?;
    to_python(py, &map.ranking)
}

#[pymodule]
fn vicha_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(build_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(select_concepts, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(read_log, m)?)?;
    m.add_function(wrap_pyfunction!(eval_retrieval, m)?)?;
    m.add_function(wrap_pyfunction!(ground, m)?)?;
    Ok(())
}
