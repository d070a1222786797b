//! Harnesses for the operator properties: comparison, convexity, Jensen,
//! time consistency, and the Ito decomposition of `phi(Y)`.

use std::sync::Arc;

use super::regression::RegressionBasis;
use super::solver::{mean, solve_bsde_lsmc, std_dev, BsdeProblem, BsdeSolution, SolverOptions};
use super::terminal::Terminal;
use crate::error::{Error, Result};
use crate::nets::{verify_convexity, verify_monotone};
use crate::stochastic::PathEnsemble;

/// A twice-differentiable scalar function with its first two derivatives.
#[derive(Clone)]
pub struct C2Fn {
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d1: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub d2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl C2Fn {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        C2Fn {
            f: Arc::new(f),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
        }
    }

    pub fn identity() -> Self {
        C2Fn::new(|x| x, |_| 1.0, |_| 0.0)
    }

    pub fn square() -> Self {
        C2Fn::new(|x| x * x, |x| 2.0 * x, |_| 2.0)
    }

    /// `exp(a x)`.
    pub fn exp(a: f64) -> Self {
        C2Fn::new(
            move |x| (a * x).exp(),
            move |x| a * (a * x).exp(),
            move |x| a * a * (a * x).exp(),
        )
    }
}

/// Number of samples used by the driver precondition checks.
const PRECHECK_SAMPLES: usize = 2000;

/// Standard error of the pathwise difference of two solves' naive
/// estimators `xi + sum_k f_k dt` on a common ensemble.
fn paired_std_error(a: &BsdeSolution, b: &BsdeSolution) -> f64 {
    let n = a.n_steps();
    let dt = a.grid().dt();
    let diff: Vec<f64> = (0..a.n_paths())
        .map(|p| {
            let sa = a.y(p, n) + dt * (0..n).map(|k| a.driver_values_step(k)[p]).sum::<f64>();
            let sb = b.y(p, n) + dt * (0..n).map(|k| b.driver_values_step(k)[p]).sum::<f64>();
            sa - sb
        })
        .collect();
    std_dev(&diff) / (diff.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub y0_first: f64,
    pub y0_second: f64,
    /// `Y0^1 - Y0^2`.
    pub y0_gap: f64,
    /// Monte Carlo noise of the gap (paired standard error).
    pub noise: f64,
    pub tol: f64,
    /// `min over paths (Y^1 - Y^2)` at each step.
    pub step_minima: Vec<f64>,
    /// Number of `(path, step)` entries with `Y^1 - Y^2 < -tol`.
    pub violation_count: usize,
    pub max_violation: f64,
    pub pass: bool,
}

/// Solves with `xi_1` and `xi_2` on the same ensemble and checks
/// `Y^1 >= Y^2` up to `3 x` the paired noise.
pub fn check_comparison(
    problem: &BsdeProblem<'_>,
    xi_1: &Terminal,
    xi_2: &Terminal,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    let ens = problem.ensemble;
    let v1 = xi_1.values(ens);
    let v2 = xi_2.values(ens);
    if let Some(path) = v1.iter().zip(&v2).position(|(a, b)| !(a >= b)) {
        return Err(Error::InvalidComparisonPair { path });
    }
    let mono = verify_monotone(problem.driver, PRECHECK_SAMPLES, 0);
    if !mono.pass {
        return Err(Error::InvalidDriver(format!(
            "comparison needs a driver non-increasing in y; sampled df/dy up to {}",
            mono.max_dy
        )));
    }
    let s1 = solve_bsde_lsmc(&problem.with_terminal(xi_1), basis, opts)?;
    let s2 = solve_bsde_lsmc(&problem.with_terminal(xi_2), basis, opts)?;
    let noise = paired_std_error(&s1, &s2);
    let tol = 3.0 * noise;
    let mut step_minima = Vec::with_capacity(s1.n_steps() + 1);
    let mut violation_count = 0;
    let mut worst = f64::INFINITY;
    for k in 0..=s1.n_steps() {
        let m = s1
            .y_step(k)
            .iter()
            .zip(s2.y_step(k))
            .map(|(a, b)| {
                let g = a - b;
                if g < -tol {
                    violation_count += 1;
                }
                g
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.min(m);
        step_minima.push(m);
    }
    let y0_gap = s1.y0() - s2.y0();
    Ok(ComparisonReport {
        y0_first: s1.y0(),
        y0_second: s2.y0(),
        y0_gap,
        noise,
        tol,
        step_minima,
        violation_count,
        max_violation: (-worst).max(0.0),
        pass: y0_gap >= -tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityJensenReport {
    /// `lambda Y0(xi_1) + (1 - lambda) Y0(xi_2) - Y0(lambda xi_1 + (1 - lambda) xi_2)`.
    pub delta_cvx: f64,
    /// `Y0(phi(xi_1)) - phi(Y0(xi_1))`.
    pub delta_jen: f64,
    pub noise: f64,
    pub tol: f64,
    pub pass: bool,
}

fn spot_check_convex(phi: &C2Fn, samples: &[f64]) -> Result<()> {
    let n = samples.len();
    if n < 2 {
        return Ok(());
    }
    for i in 0..n.min(1000) {
        let a = samples[i];
        let b = samples[(i * 7919 + 1) % n];
        let (fa, fb, fm) = ((phi.f)(a), (phi.f)(b), (phi.f)(0.5 * (a + b)));
        let slack = 64.0 * f64::EPSILON * (1.0 + fa.abs() + fb.abs() + fm.abs());
        if fm > 0.5 * (fa + fb) + slack {
            return Err(Error::InvalidArgument(format!(
                "phi fails the midpoint convexity check between {a} and {b}"
            )));
        }
    }
    Ok(())
}

/// Operator convexity and Jensen gaps with common random numbers; both must
/// be `>= -3 x` the largest reported Monte Carlo noise of the solves.
pub fn check_convexity_and_jensen(
    problem: &BsdeProblem<'_>,
    xi_1: &Terminal,
    xi_2: &Terminal,
    lambda: f64,
    phi: &C2Fn,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<ConvexityJensenReport> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let cvx = verify_convexity(problem.driver, PRECHECK_SAMPLES, 0, 0.0);
    if !cvx.pass {
        return Err(Error::InvalidDriver(format!(
            "driver is not convex in (y, z): midpoint gap up to {}",
            cvx.max_gap
        )));
    }
    spot_check_convex(phi, &xi_1.values(problem.ensemble))?;
    let mixed = Terminal::mix(xi_1, xi_2, lambda);
    let p = phi.f.clone();
    let phi_xi = xi_1.map(move |v| p(v));
    let s1 = solve_bsde_lsmc(&problem.with_terminal(xi_1), basis, opts)?;
    let s2 = solve_bsde_lsmc(&problem.with_terminal(xi_2), basis, opts)?;
    let sm = solve_bsde_lsmc(&problem.with_terminal(&mixed), basis, opts)?;
    let sj = solve_bsde_lsmc(&problem.with_terminal(&phi_xi), basis, opts)?;
    let delta_cvx = lambda * s1.y0() + (1.0 - lambda) * s2.y0() - sm.y0();
    let delta_jen = sj.y0() - (phi.f)(s1.y0());
    let noise = [&s1, &s2, &sm, &sj]
        .iter()
        .map(|s| s.mc_std_error())
        .fold(0.0, f64::max);
    let tol = 3.0 * noise;
    Ok(ConvexityJensenReport {
        delta_cvx,
        delta_jen,
        noise,
        tol,
        pass: delta_cvx >= -tol && delta_jen >= -tol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub y0_direct: f64,
    pub y0_nested: f64,
    pub gap: f64,
    pub noise: f64,
}

/// Solves on `[0, T]` directly and by composition: the direct solve's
/// values at `s` are fitted as a polynomial surface of `X_s`, which serves
/// as terminal data for a solve on `[0, s]`.
pub fn check_dynamic_consistency(
    problem: &BsdeProblem<'_>,
    split_time: f64,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<ConsistencyReport> {
    let ens = problem.ensemble;
    let s = ens
        .grid()
        .node_index(split_time)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("split time {split_time} is not a positive grid node")))?;
    let direct = solve_bsde_lsmc(problem, basis, opts)?;
    let n = ens.n_steps();
    let nested = if s == n {
        solve_bsde_lsmc(problem, basis, opts)?
    } else {
        let head = ens.head(s)?;
        let surfaces = direct_surface_at(&direct, ens, s, basis)?;
        let terminal = Terminal::of_state(move |x| surfaces.0.predict(&surfaces.1, x));
        let sub = BsdeProblem::new(&head, &terminal, problem.driver);
        solve_bsde_lsmc(&sub, basis, opts)?
    };
    Ok(ConsistencyReport {
        y0_direct: direct.y0(),
        y0_nested: nested.y0(),
        gap: (direct.y0() - nested.y0()).abs(),
        noise: direct.mc_std_error().max(nested.mc_std_error()),
    })
}

fn direct_surface_at(
    sol: &BsdeSolution,
    ens: &PathEnsemble,
    step: usize,
    basis: RegressionBasis,
) -> Result<(super::Regressor, Vec<f64>)> {
    let sd = ens.state_dim();
    let xs: Vec<f64> = (0..ens.n_paths()).flat_map(|p| ens.state(p, step).to_vec()).collect();
    let reg = super::Regressor::new(basis, &xs, sd, step)?;
    let coef = reg.fit(&xs, sd, &[sol.y_step(step)]).remove(0);
    Ok((reg, coef))
}

/// Per-step ensemble means of the two drift terms of `d phi(Y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDecomposition {
    /// `-phi'(Y_k) f_k`.
    pub ambiguity_drift: Vec<f64>,
    /// `phi''(Y_k) |Z_k|^2 / 2`.
    pub convexity_correction: Vec<f64>,
}

/// Splits the drift of `phi(Y)` into the part carried by the driver and the
/// Ito correction. `f_k` is the driver value the solver used at step `k`.
pub fn effective_drift_decomposition(solution: &BsdeSolution, phi: &C2Fn) -> DriftDecomposition {
    let n = solution.n_steps();
    let d = solution.noise_dim();
    let mut amb = Vec::with_capacity(n);
    let mut cvx = Vec::with_capacity(n);
    for k in 0..n {
        let y = solution.y_step(k);
        let f = solution.driver_values_step(k);
        let z = solution.z_step(k);
        let a: Vec<f64> = y.iter().zip(f).map(|(y, f)| -(phi.d1)(*y) * f).collect();
        let c: Vec<f64> = y
            .iter()
            .zip(z.chunks(d))
            .map(|(y, z)| 0.5 * (phi.d2)(*y) * z.iter().map(|v| v * v).sum::<f64>())
            .collect();
        amb.push(mean(&a));
        cvx.push(mean(&c));
    }
    DriftDecomposition {
        ambiguity_drift: amb,
        convexity_correction: cvx,
    }
}

/// Per-path residual of the discrete Ito reconstruction
/// `phi(Y_T) - phi(Y_0) - sum_k [(drift terms) dt + phi'(Y_k) Z_k . dW_k]`.
pub fn drift_reconstruction_residuals(solution: &BsdeSolution, ensemble: &PathEnsemble, phi: &C2Fn) -> Vec<f64> {
    let n = solution.n_steps();
    let dt = solution.grid().dt();
    (0..solution.n_paths())
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..n {
                let y = solution.y(p, k);
                let z = solution.z(p, k);
                let f = solution.driver_values_step(k)[p];
                let z2: f64 = z.iter().map(|v| v * v).sum();
                let dw = ensemble.bundle().dw(p, k);
                let mart: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                acc += (-(phi.d1)(y) * f + 0.5 * (phi.d2)(y) * z2) * dt + (phi.d1)(y) * mart;
            }
            (phi.f)(solution.y(p, n)) - (phi.f)(solution.y(p, 0)) - acc
        })
        .collect()
}
