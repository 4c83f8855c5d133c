//! Python bindings: stream generation, single runs, the metric functions and
//! the gradient-check suite.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use modalanchor_core::cli::{self, MetricsRow};
use modalanchor_core::config::ExperimentConfig;
use modalanchor_core::gradsuite;
use modalanchor_core::metrics;
use modalanchor_core::tensor::Tensor;
use modalanchor_core::trainer::{run_sequence, StrategyKind};
use modalanchor_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::Validation { .. } | Error::Format(_) => {
            PyIOError::new_err(e.to_string())
        }
        Error::Numeric(_) | Error::Contract(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(overrides: Option<HashMap<String, String>>) -> PyResult<ExperimentConfig> {
    let mut pairs: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    pairs.sort();
    ExperimentConfig::parse("", &pairs).map_err(to_py)
}

/// Resolved default configuration as `key -> value` strings.
#[pyfunction]
fn default_config() -> HashMap<String, String> {
    ExperimentConfig::default().to_pairs().into_iter().collect()
}

/// Stream manifest (JSON text) for `seed` under the given overrides.
#[pyfunction]
#[pyo3(signature = (seed, overrides=None))]
fn stream_manifest(seed: u64, overrides: Option<HashMap<String, String>>) -> PyResult<String> {
    let cfg = config(overrides)?;
    let stream = cfg.build_stream(seed).map_err(to_py)?;
    serde_json::to_string(&stream.manifest()).map_err(|e| to_py(e.into()))
}

/// Train one strategy over the stream of `seed`; returns the metrics row and `R`.
#[pyfunction]
#[pyo3(signature = (strategy, seed, overrides=None))]
fn run(
    py: Python<'_>,
    strategy: &str,
    seed: u64,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<HashMap<String, Py<PyAny>>> {
    let cfg = config(overrides)?;
    let kind: StrategyKind = strategy.parse().map_err(to_py)?;
    let stream = cfg.build_stream(seed).map_err(to_py)?;
    let strat = cfg.strategy(kind);
    let art = py
        .detach(|| run_sequence(&stream, &strat, &cfg.train, seed))
        .map_err(|a| to_py(a.error))?;
    let row = MetricsRow::from_run(&art).map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("bwt".into(), row.bwt.into_pyobject(py)?.into_any().unbind());
    out.insert("fwt".into(), row.fwt.into_pyobject(py)?.into_any().unbind());
    out.insert(
        "forgetting".into(),
        row.forgetting.into_pyobject(py)?.into_any().unbind(),
    );
    out.insert("avg_acc".into(), row.avg_acc.into_pyobject(py)?.into_any().unbind());
    out.insert("drift_cos".into(), row.drift_cos.into_pyobject(py)?.into_any().unbind());
    out.insert("retention".into(), row.retention.into_pyobject(py)?.into_any().unbind());
    out.insert("r".into(), art.r.clone().into_pyobject(py)?.into_any().unbind());
    out.insert(
        "baseline".into(),
        art.baseline.clone().into_pyobject(py)?.into_any().unbind(),
    );
    out.insert(
        "wallclock".into(),
        art.wallclock.clone().into_pyobject(py)?.into_any().unbind(),
    );
    Ok(out)
}

/// Run a config file's full matrix, as the `run` command does.
#[pyfunction]
#[pyo3(signature = (config_path=None, sets=Vec::new(), out=None, jobs=1))]
fn run_experiment(
    py: Python<'_>,
    config_path: Option<PathBuf>,
    sets: Vec<String>,
    out: Option<PathBuf>,
    jobs: usize,
) -> PyResult<String> {
    let summary = py
        .detach(|| cli::cmd_run(config_path.as_deref(), &sets, out.as_deref(), jobs))
        .map_err(to_py)?;
    Ok(summary.out.display().to_string())
}

#[pyfunction]
fn backward_transfer(r: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::backward_transfer(&r).map_err(to_py)
}

#[pyfunction]
fn forward_transfer(r: Vec<Vec<f64>>, baseline: Vec<f64>) -> PyResult<f64> {
    metrics::forward_transfer(&r, &baseline).map_err(to_py)
}

#[pyfunction]
fn forgetting_rate(r: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::forgetting_rate(&r).map_err(to_py)
}

#[pyfunction]
fn average_accuracy(r: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::average_accuracy(&r).map_err(to_py)
}

/// Top-`k` PCA projection of row data: `(coords, explained)`.
#[pyfunction]
#[pyo3(signature = (rows, k=2))]
fn pca_project(rows: Vec<Vec<f64>>, k: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let x = Tensor::from_rows(&rows).map_err(to_py)?;
    let p = metrics::pca_project(&x, k).map_err(to_py)?;
    Ok((p.coords.to_rows(), p.explained))
}

/// `(component, worst relative error, passed)` for every finite-difference case.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<Vec<(String, f64, bool)>> {
    let entries = py.detach(gradsuite::run_suite).map_err(to_py)?;
    Ok(entries
        .into_iter()
        .map(|e| {
            let ok = e.passed();
            (e.component, e.max_rel_error, ok)
        })
        .collect())
}

#[pymodule]
fn modalanchor(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(stream_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(backward_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(forward_transfer, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting_rate, m)?)?;
    m.add_function(wrap_pyfunction!(average_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
