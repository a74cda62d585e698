use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qglue::cli::{execute, CommandKind, Params};
use qglue::delaunay::{solve_orbit, DEFAULT_TOL};
use qglue::gauges::{derive_constants, Dimension};
use qglue::jacobi::indicial_roots;
use qglue::Error;

create_exception!(pyqglue, NumericalError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Domain(_) | Error::Grid(_) | Error::Config(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => NumericalError::new_err(e.to_string()),
    }
}

fn dim(n: usize) -> PyResult<Dimension> {
    Dimension::new(n).map_err(to_py)
}

fn json<T: serde::Serialize>(x: &T) -> PyResult<String> {
    serde_json::to_string(x).map_err(|e| to_py(e.into()))
}

/// Constants for dimension `n`, as a JSON object.
#[pyfunction]
#[pyo3(signature = (n = 5))]
fn constants(n: usize) -> PyResult<String> {
    json(&derive_constants(dim(n)?))
}

/// One period of the orbit with minimum `eps`, sampled at `samples` points.
#[pyfunction]
#[pyo3(signature = (eps, n = 5, samples = 64))]
fn orbit(py: Python<'_>, eps: f64, n: usize, samples: usize) -> PyResult<String> {
    let n = dim(n)?;
    let record = py.detach(|| solve_orbit(n, eps, DEFAULT_TOL).map(|o| o.record(samples))).map_err(to_py)?;
    json(&record)
}

/// Floquet exponents of the linearization about the orbit, per mode.
#[pyfunction]
#[pyo3(signature = (eps, modes, n = 5))]
fn indicial(py: Python<'_>, eps: f64, modes: Vec<usize>, n: usize) -> PyResult<String> {
    let n = dim(n)?;
    let spectrum = py
        .detach(|| solve_orbit(n, eps, DEFAULT_TOL).and_then(|o| indicial_roots(&o, &modes)))
        .map_err(to_py)?;
    json(&spectrum)
}

/// Run a CLI command in memory. `params` is the JSON params object of a run
/// manifest. Returns `(summary_json, {artifact_name: contents})`; raises
/// `NumericalError` when the command ran but failed its goal.
#[pyfunction]
#[pyo3(signature = (command, params = "{}", seed = 0))]
fn run<'py>(py: Python<'py>, command: &str, params: &str, seed: u64) -> PyResult<(String, Bound<'py, PyDict>)> {
    let kind: CommandKind = serde_json::from_value(serde_json::Value::String(command.to_owned()))
        .map_err(|_| PyValueError::new_err(format!("unknown command {command:?}")))?;
    let params: Params = serde_json::from_str(params).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = py.detach(|| execute(kind, &params, seed)).map_err(to_py)?;
    if let Some(e) = outcome.failure {
        return Err(to_py(e));
    }
    let files = PyDict::new(py);
    for a in &outcome.artifacts {
        files.set_item(a.name, &a.contents)?;
    }
    Ok((json(&outcome.summary)?, files))
}

#[pymodule]
fn pyqglue(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(constants, m)?)?;
    m.add_function(wrap_pyfunction!(orbit, m)?)?;
    m.add_function(wrap_pyfunction!(indicial, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
