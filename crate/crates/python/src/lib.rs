//! Python bindings. Matrices cross the boundary as lists of rows and model
//! parameters as the JSON documents written by the command-line tool.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use switchode::denoise::{compute_psi_features, denoise_columns, DenoiseConfig, SigmaMode};
use switchode::emfit::{fit as em_fit, init_params, FitConfig};
use switchode::eval::{match_states, param_distance, roc_from_params, DEFAULT_EPSILON};
use switchode::io::{params_from_json, params_to_json};
use switchode::select::bic;
use switchode::simulate::{dgp1, dgp2, simulate_benchmark, BasisFamily};

fn to_py(e: switchode::Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn sigma_mode(sigma: Option<f64>) -> SigmaMode {
    sigma.map_or(SigmaMode::Estimate, SigmaMode::Known)
}

/// Simulates a benchmark. Returns `(times, observations, truth_json)`.
#[pyfunction]
#[pyo3(signature = (dgp, n, seed, t = 40.0, sigma = 0.01))]
fn simulate(dgp: &str, n: usize, seed: u64, t: f64, sigma: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, String)> {
    let bench = match dgp {
        "dgp1" => dgp1(),
        "dgp2" => dgp2(),
        other => return Err(PyValueError::new_err(format!("unknown benchmark {other:?}; use dgp1 or dgp2"))),
    };
    let (_, obs) = simulate_benchmark(&bench, t, n, sigma, seed).map_err(to_py)?;
    let truth = params_to_json(&bench.truth(sigma)).map_err(to_py)?;
    Ok((obs.times(), to_rows(&obs.y), truth))
}

/// Wavelet-denoises every column. Returns `(x_hat, sigma_per_column)`.
#[pyfunction]
#[pyo3(signature = (y, delta = 0.1, sigma = None))]
fn denoise(y: Vec<Vec<f64>>, delta: f64, sigma: Option<f64>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let config = DenoiseConfig { delta, sigma: sigma_mode(sigma), ..DenoiseConfig::default() };
    let (x_hat, sigmas) = denoise_columns(&to_array(y)?, &config).map_err(to_py)?;
    Ok((to_rows(&x_hat), sigmas))
}

/// Fits the switching model at one penalty with features from `x_hat`.
/// Returns `(params_json, objective, bic, posterior)`.
#[pyfunction]
#[pyo3(signature = (y, x_hat, h, k, m, lam, seed = 0))]
fn fit(
    y: Vec<Vec<f64>>,
    x_hat: Vec<Vec<f64>>,
    h: f64,
    k: usize,
    m: usize,
    lam: f64,
    seed: u64,
) -> PyResult<(String, f64, f64, Vec<Vec<f64>>)> {
    let y = to_array(y)?;
    let psi = compute_psi_features(&to_array(x_hat)?, BasisFamily::monomial(m), h).map_err(to_py)?;
    let init = init_params(k, y.ncols(), m, seed).map_err(to_py)?;
    let result = em_fit(&y, &psi, &init, &FitConfig::default().with_lambda(lam)).map_err(to_py)?;
    let json = params_to_json(&result.params).map_err(to_py)?;
    Ok((json, result.objective(), bic(&result, result.n()), to_rows(&result.posterior.w)))
}

/// Per-state AUC and drift distance of a fit against the truth.
#[pyfunction]
#[pyo3(signature = (params_json, truth_json, epsilon = DEFAULT_EPSILON))]
fn evaluate(params_json: &str, truth_json: &str, epsilon: f64) -> PyResult<(Vec<f64>, f64)> {
    let est = params_from_json(params_json).map_err(to_py)?;
    let truth = params_from_json(truth_json).map_err(to_py)?;
    let xi = match_states(&est, &truth).map_err(to_py)?.xi1;
    let distance = param_distance(&est, &truth, &xi).map_err(to_py)?.theta;
    let roc = roc_from_params(&[(0.0, &est)], &truth, epsilon).map_err(to_py)?;
    Ok((roc.auc, distance))
}

#[pymodule]
fn switchode_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(denoise, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
