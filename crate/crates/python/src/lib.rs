//! Python bindings: the Merton HJB, the LSMC solver on closed-form drivers
//! and the sample oracles.
//!
//! Build the importable module with
//! `cargo build --release -p nexp-python --features extension-module`
//! and copy `libnexp.so` to `nexp.so`; the workspace script
//! `python/smoke_test.py` does both.

use std::sync::Arc;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use nexp_core::bsde::{
    closed_form_oracle, solve_bsde_lsmc, BsdeProblem, OracleKind, RegressionBasis, SolverOptions, Terminal,
};
use nexp_core::merton::{self, HjbGridSpec, MarketParams};
use nexp_core::nets::BuiltinDriver;
use nexp_core::rng::derive_seed;
use nexp_core::stochastic::{sample_brownian, simulate_forward, wasserstein2_1d, BrownianMotion, TimeGrid};

fn to_py(e: nexp_core::Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn market(mu: f64, r: f64, sigma: f64, gamma: f64, horizon: f64) -> PyResult<MarketParams> {
    MarketParams::new(mu, r, sigma, gamma, horizon).map_err(to_py)
}

/// Classical Merton fraction and value exponent `(pi*, rho)`.
#[pyfunction]
#[pyo3(signature = (mu, r, sigma, gamma, horizon = 1.0))]
fn classical_merton(mu: f64, r: f64, sigma: f64, gamma: f64, horizon: f64) -> PyResult<(f64, f64)> {
    let c = merton::classical_merton(&market(mu, r, sigma, gamma, horizon)?).map_err(to_py)?;
    Ok((c.fraction, c.rho))
}

/// HJB solution at `t = 0`: `(wealth, value, policy)` over the grid.
#[pyfunction]
#[pyo3(signature = (mu, r, sigma, gamma, theta, horizon = 1.0, intervals = 200))]
#[allow(clippy::too_many_arguments)]
fn solve_hjb(
    mu: f64,
    r: f64,
    sigma: f64,
    gamma: f64,
    theta: f64,
    horizon: f64,
    intervals: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let spec = HjbGridSpec {
        intervals,
        ..Default::default()
    };
    let g = merton::solve_hjb(&market(mu, r, sigma, gamma, horizon)?, theta, &spec).map_err(to_py)?;
    let n = g.n_nodes();
    let wealth = (0..n).map(|j| g.wealth(j)).collect();
    let value = (0..n).map(|j| g.value(0, j)).collect();
    Ok((wealth, value, g.policy_step(0).to_vec()))
}

/// `(Y0, sample oracle)` for the entropic driver with `xi = W_T`.
#[pyfunction]
#[pyo3(signature = (theta, paths = 20000, steps = 20, seed = 0))]
fn entropic_y0(theta: f64, paths: usize, steps: usize, seed: u64) -> PyResult<(f64, f64)> {
    let grid = TimeGrid::new(1.0, steps).map_err(to_py)?;
    let bundle = Arc::new(sample_brownian(&grid, paths, 1, derive_seed(seed, "brownian")).map_err(to_py)?);
    let ens = simulate_forward(&BrownianMotion::new(1), &grid, bundle).map_err(to_py)?;
    let xi = Terminal::brownian(&[1.0], 0.0);
    let driver = BuiltinDriver::entropic(theta);
    let sol = solve_bsde_lsmc(
        &BsdeProblem::new(&ens, &xi, &driver),
        RegressionBasis::new(3),
        &SolverOptions::default(),
    )
    .map_err(to_py)?;
    let oracle = closed_form_oracle(&OracleKind::Entropic { theta }, &xi.values(&ens), None, 1.0).map_err(to_py)?;
    Ok((sol.y0(), oracle))
}

/// `-(1/theta) log mean exp(-theta xi)` on the given samples.
#[pyfunction]
fn entropic_oracle(xi: Vec<f64>, theta: f64) -> PyResult<f64> {
    closed_form_oracle(&OracleKind::Entropic { theta }, &xi, None, 1.0).map_err(to_py)
}

/// Quadratic Wasserstein distance between two equal-size samples.
#[pyfunction]
fn wasserstein2(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    wasserstein2_1d(&a, &b).map_err(to_py)
}

#[pymodule]
pub fn nexp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(classical_merton, m)?)?;
    m.add_function(wrap_pyfunction!(solve_hjb, m)?)?;
    m.add_function(wrap_pyfunction!(entropic_y0, m)?)?;
    m.add_function(wrap_pyfunction!(entropic_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein2, m)?)?;
    Ok(())
}
