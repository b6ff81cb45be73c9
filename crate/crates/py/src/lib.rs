//! Python bindings. Structured values cross the boundary as JSON strings in the same
//! schemas the `rse` binary reads and writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rselayer::cli::{self, CliError, ExperimentConfig, ModelSelector};
use rselayer::conic::ConicSolver;
use rselayer::learn::{self, TrainConfig};
use rselayer::rse;
use rselayer::Dataset;

fn py_err(e: CliError) -> PyErr {
    match e {
        CliError::Validation(m) => PyValueError::new_err(m),
        CliError::Runtime(m) => PyRuntimeError::new_err(m),
    }
}

fn parse_dataset(text: &str) -> PyResult<Dataset> {
    Dataset::from_json(text).map_err(|e| PyValueError::new_err(format!("dataset: {e}")))
}

fn parse_selector(name: &str) -> PyResult<ModelSelector> {
    ModelSelector::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown estimator '{name}'")))
}

/// Default experiment configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json()
}

/// Scenario dataset (JSON) for an experiment configuration (JSON).
#[pyfunction]
#[pyo3(signature = (config_json, workers=None))]
fn generate_dataset(config_json: &str, workers: Option<usize>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    Ok(cli::build_dataset(&cfg, workers).map_err(py_err)?.to_json())
}

/// RMSE comparison of `wlav_direct` / `wls_direct` over a dataset; returns the
/// `compare.json` document.
#[pyfunction]
#[pyo3(signature = (dataset_json, estimators, workers=None))]
fn compare(
    dataset_json: &str,
    estimators: Vec<String>,
    workers: Option<usize>,
) -> PyResult<String> {
    let ds = parse_dataset(dataset_json)?;
    let sel = estimators
        .iter()
        .map(|n| parse_selector(n))
        .collect::<PyResult<Vec<_>>>()?;
    let rep = cli::compare(&ds, &sel, workers).map_err(py_err)?;
    serde_json::to_string_pretty(&rep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Relaxed WLAV estimate of one scenario: `(v, theta, exactness_ratio)`.
#[pyfunction]
fn estimate_wlav(dataset_json: &str, index: usize) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let ds = parse_dataset(dataset_json)?;
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| PyValueError::new_err(format!("no scenario {index}")))?;
    let model = cli::load_model(&ds.case_id).map_err(py_err)?;
    let mut solver = ConicSolver::default();
    let (_, rec) =
        rse::estimate_wlav_direct(&model, &s.meta, &s.z, &ds.nominal_sigma(s), &mut solver)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((rec.state.v, rec.state.theta, rec.exactness_ratio))
}

/// Largest relative error of the end-to-end gradient check on the 3-bus toy system.
#[pyfunction]
#[pyo3(signature = (seed=0, step=1e-5))]
fn gradient_check(seed: u64, step: f64) -> PyResult<f64> {
    let run = || -> Result<f64, learn::LearnError> {
        let (grid, meta, z, target) = learn::toy_check_sample(seed)?;
        let cfg = TrainConfig {
            delta: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        Ok(learn::gradient_check(&grid, &meta, &z, &target, &cfg, step)?.max_rel_error)
    };
    run().map_err(|e| py_err(e.into()))
}

/// Weighted Huber loss `Σ ŵ h_δ(ε)`.
#[pyfunction]
fn huber_loss(eps: Vec<f64>, w_hat: Vec<f64>, delta: f64) -> PyResult<f64> {
    if eps.len() != w_hat.len() {
        return Err(PyValueError::new_err("eps and w_hat differ in length"));
    }
    Ok(learn::huber_loss(&eps, &w_hat, delta))
}

#[pymodule]
fn pyrselayer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_wlav, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(huber_loss, m)?)?;
    Ok(())
}
