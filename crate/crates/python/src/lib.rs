//! Python bindings. Run configurations use the same JSON layout as the
//! `monoimpute` command line; datasets travel as CSV text.

use ::monoimpute as core;
use core::analysis::{analyze_all, rubin_pool_one, simulate_scenario_with, PooledCoefficient, SCENARIO_LATENT_SD};
use core::cli::{cmd_impute, cmd_tipping, RunConfig};
use core::data::{read_dataset, Dataset};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(json: &str) -> PyResult<RunConfig> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("config: {e}")))
}

fn csv(ds: &Dataset, token: &str) -> PyResult<String> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf, token).map_err(err)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

fn coefficient<'py>(py: Python<'py>, c: &PooledCoefficient) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("name", &c.name)?;
    d.set_item("estimate", c.estimate)?;
    d.set_item("within", c.within)?;
    d.set_item("between", c.between)?;
    d.set_item("total", c.total)?;
    d.set_item("df", c.df)?;
    d.set_item("t", c.t)?;
    d.set_item("p", c.p)?;
    Ok(d)
}

/// Simulate a trial; returns `(observed_csv, full_csv)`.
#[pyfunction]
#[pyo3(signature = (scenario, n, seed, latent_sd = None))]
fn simulate(scenario: u8, n: usize, seed: u64, latent_sd: Option<f64>) -> PyResult<(String, String)> {
    let sc = simulate_scenario_with(scenario, n, seed, latent_sd.unwrap_or(SCENARIO_LATENT_SD)).map_err(err)?;
    Ok((csv(&sc.observed, "NA")?, csv(&sc.full, "NA")?))
}

/// Run the configured engine and write the imputations; returns their CSV text.
#[pyfunction]
fn impute(config_json: &str) -> PyResult<Vec<String>> {
    let cfg = config(config_json)?;
    let out = cmd_impute(&cfg).map_err(err)?;
    out.datasets.iter().map(|d| csv(d, &cfg.data.schema.missing_token)).collect()
}

/// Pool the configured analysis over completed datasets given as CSV text.
#[pyfunction]
fn analyze<'py>(py: Python<'py>, config_json: &str, datasets: Vec<String>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config(config_json)?;
    let spec = cfg.analysis.as_ref().ok_or_else(|| PyValueError::new_err("config: analysis is required"))?;
    let sets = datasets.iter().map(|t| read_dataset(t.as_bytes(), &cfg.data.schema)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let pooled = analyze_all(&sets, spec).map_err(err)?;
    pooled.coefficients.iter().map(|c| coefficient(py, c)).collect()
}

/// Tipping-point grid as CSV text.
#[pyfunction]
fn tipping(config_json: &str) -> PyResult<String> {
    let grid = cmd_tipping(&config(config_json)?).map_err(err)?;
    let mut buf = Vec::new();
    grid.write_csv(&mut buf).map_err(err)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

/// Rubin's rules for a single coefficient.
#[pyfunction]
fn pool<'py>(py: Python<'py>, estimates: Vec<f64>, variances: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let c = rubin_pool_one("coef", &estimates, &variances).map_err(err)?;
    coefficient(py, &c)
}

#[pymodule]
fn monoimpute(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(impute, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(tipping, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    Ok(())
}
