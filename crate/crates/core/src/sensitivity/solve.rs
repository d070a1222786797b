use rayon::prelude::*;

use crate::bsde::solver::{clamp_opt, clip_bounds_linear, continuation_and_z, state_slice};
use crate::bsde::{solve_bsde_lsmc, BsdeProblem, BsdeSolution, RegressionBasis, SolverOptions, Terminal};
use crate::error::{Error, Result};
use crate::nets::Driver;
use crate::stochastic::PathEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensitivityOptions {
    /// Keep the per-path sensitivities of every step (memory `n_steps * n_params * n_paths`).
    pub store_paths: bool,
    /// Also compute the normalization penalty and its gradient.
    pub normalization: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            store_paths: false,
            normalization: true,
        }
    }
}

/// Parameter sensitivities of a BSDE solve.
#[derive(Debug, Clone)]
pub struct SensitivitySolution {
    y0: f64,
    grad_y0: Vec<f64>,
    penalty: f64,
    penalty_grad: Vec<f64>,
    paths: Option<Vec<Vec<Vec<f64>>>>,
}

impl SensitivitySolution {
    /// `Y_0` of the primary solve the sensitivities were computed along.
    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn grad_y0(&self) -> &[f64] {
        &self.grad_y0
    }

    pub fn n_params(&self) -> usize {
        self.grad_y0.len()
    }

    /// Mean over paths and steps of `f(t, X, Y~, 0)^2 dt`.
    pub fn normalization_penalty(&self) -> f64 {
        self.penalty
    }

    pub fn normalization_gradient(&self) -> &[f64] {
        &self.penalty_grad
    }

    /// Per-path sensitivity of `Y` at `step` to parameter `param`, when stored.
    pub fn path_sensitivity(&self, step: usize, param: usize) -> Option<&[f64]> {
        self.paths.as_ref().map(|s| s[step][param].as_slice())
    }
}

/// Backward solve of the linearized BSDE for every parameter coordinate.
///
/// The recursion differentiates the discrete scheme along the primary
/// solution: the same regressors are used (one fit per step shared by all
/// coordinates), the inner fixed-point passes are differentiated in place,
/// and clipped `Z` entries follow their clip bound.
pub fn solve_sensitivity_bsde(
    problem: &BsdeProblem<'_>,
    primary: &BsdeSolution,
    opts: &SensitivityOptions,
) -> Result<SensitivitySolution> {
    let ens = problem.ensemble;
    let driver = problem.driver;
    let n = ens.n_steps();
    let np = ens.n_paths();
    let d = ens.noise_dim();
    let sd = ens.state_dim();
    let dt = ens.grid().dt();
    if primary.n_paths() != np || primary.n_steps() != n || primary.noise_dim() != d {
        return Err(Error::InvalidArgument(
            "primary solution was not computed on this ensemble".into(),
        ));
    }
    let sopts = primary.options();
    let trunc = sopts.truncation;
    let iters = sopts.inner_picard_iters;
    let np_params = driver.n_params();

    let mut next: Vec<Vec<f64>> = vec![vec![0.0; np]; np_params];
    let mut stored = opts.store_paths.then(|| vec![Vec::new(); n + 1]);
    if let Some(s) = stored.as_mut() {
        s[n] = next.clone();
    }
    let mut penalty = 0.0;
    let mut penalty_grad = vec![0.0; np_params];
    let zero_z = vec![0.0; d];

    for k in (0..n).rev() {
        let xk = state_slice(ens, k);
        let reg = primary.regressor(k);
        let design = reg.design(&xk, sd);
        let (c, zraw) = continuation_and_z(&design, ens, k, primary.y_step(k + 1));

        let trefs: Vec<&[f64]> = next.iter().map(|v| v.as_slice()).collect();
        let dc = design.predict(&design.fit(&trefs));
        let mut ztargets = Vec::with_capacity(d * np_params);
        for j in 0..d {
            for i in 0..np_params {
                ztargets.push(
                    (0..np)
                        .map(|p| (next[i][p] - dc[i][p]) * ens.bundle().dw(p, k)[j])
                        .collect::<Vec<f64>>(),
                );
            }
        }
        let zrefs: Vec<&[f64]> = ztargets.iter().map(|v| v.as_slice()).collect();
        let mut dz = design.predict(&design.fit(&zrefs));
        for col in &mut dz {
            for v in col.iter_mut() {
                *v /= dt;
            }
        }
        // Clipped entries sit on a bound, so they move with the bound.
        for j in 0..d {
            if let Some(cl) = clip_bounds_linear(&zraw[j], sopts.z_clip) {
                let raw = &zraw[j];
                let moved: Vec<(usize, bool)> = (0..np)
                    .filter_map(|p| {
                        if raw[p] < cl.lo {
                            Some((p, false))
                        } else if raw[p] > cl.hi {
                            Some((p, true))
                        } else {
                            None
                        }
                    })
                    .collect();
                if moved.is_empty() {
                    continue;
                }
                for i in 0..np_params {
                    let col = &dz[j * np_params + i];
                    let dlo: f64 = cl.terms.iter().map(|&(q, a, _)| a * col[q]).sum();
                    let dhi: f64 = cl.terms.iter().map(|&(q, _, b)| b * col[q]).sum();
                    let col = &mut dz[j * np_params + i];
                    for &(p, upper) in &moved {
                        col[p] = if upper { dhi } else { dlo };
                    }
                }
            }
        }

        let t = ens.grid().time(k);
        let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let x = &xk[p * sd..(p + 1) * sd];
                let zp = primary.z(p, k);
                let active = |y: f64| trunc.is_none_or(|kk| y.abs() < kk);
                let mut gz = vec![0.0; d];
                let mut gth = vec![0.0; np_params];
                // One differentiated pass of `y -> c + dt f(t, x, y, z)`; returns the new `y`.
                let mut step = |y: f64, dyt: &[f64], out: &mut [f64]| {
                    let (value, dy) = driver.gradients_into(t, x, clamp_opt(y, trunc), zp, &mut gz, &mut gth);
                    let fy = if active(y) { dy } else { 0.0 };
                    for i in 0..np_params {
                        let mut s = gth[i] + fy * dyt[i];
                        for j in 0..d {
                            s += gz[j] * dz[j * np_params + i][p];
                        }
                        out[i] = dc[i][p] + dt * s;
                    }
                    c[p] + dt * value
                };
                let mut yt = c[p];
                let mut dyt: Vec<f64> = (0..np_params).map(|i| dc[i][p]).collect();
                let mut dy = vec![0.0; np_params];
                for _ in 0..iters {
                    yt = step(yt, &dyt, &mut dy);
                    std::mem::swap(&mut dyt, &mut dy);
                }
                step(yt, &dyt, &mut dy);

                let mut pen = 0.0;
                if opts.normalization {
                    let (value, fy0) = driver.gradients_into(t, x, clamp_opt(yt, trunc), &zero_z, &mut gz, &mut gth);
                    let fy = if active(yt) { fy0 } else { 0.0 };
                    pen = value * value;
                    for i in 0..np_params {
                        gth[i] = 2.0 * value * (gth[i] + fy * dyt[i]);
                    }
                }
                let pgrad = gth;
                (dy, pen, pgrad)
            })
            .collect();

        let mut cur = vec![vec![0.0; np]; np_params];
        for (p, (dy, pen, pgrad)) in rows.iter().enumerate() {
            for i in 0..np_params {
                cur[i][p] = dy[i];
            }
            if opts.normalization {
                penalty += pen;
                for (a, b) in penalty_grad.iter_mut().zip(pgrad) {
                    *a += b;
                }
            }
        }
        if cur.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::SolverDiverged { step: k });
        }
        if let Some(s) = stored.as_mut() {
            s[k] = cur.clone();
        }
        next = cur;
    }

    let scale = dt / (n * np) as f64;
    penalty *= scale;
    for g in &mut penalty_grad {
        *g *= scale;
    }
    let grad_y0 = next.iter().map(|v| v.iter().sum::<f64>() / np as f64).collect();
    Ok(SensitivitySolution {
        y0: primary.y0(),
        grad_y0,
        penalty,
        penalty_grad,
        paths: stored,
    })
}

/// Central finite differences against the sensitivity solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub coords: Vec<usize>,
    pub sensitivity: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub max_relative_error: f64,
}

/// Floor for the relative-error scale.
const FD_ATOL: f64 = 1e-8;

/// Re-solves at `theta +- h e_j` on the same ensemble and compares the
/// central difference of `Y_0` with the sensitivity solve.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check<D: Driver>(
    ensemble: &PathEnsemble,
    terminal: &Terminal,
    driver: &D,
    coords: &[usize],
    h: f64,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let theta = driver.params().to_vec();
    if let Some(&j) = coords.iter().find(|&&j| j >= theta.len()) {
        return Err(Error::InvalidArgument(format!(
            "coordinate {j} out of range for {} parameters",
            theta.len()
        )));
    }
    let problem = BsdeProblem::new(ensemble, terminal, driver);
    let primary = solve_bsde_lsmc(&problem, basis, opts)?;
    let sens = solve_sensitivity_bsde(
        &problem,
        &primary,
        &SensitivityOptions {
            store_paths: false,
            normalization: false,
        },
    )?;
    let y0_at = |j: usize, delta: f64| -> Result<f64> {
        let mut th = theta.clone();
        th[j] += delta;
        let shifted = driver.with_params(&th)?;
        Ok(solve_bsde_lsmc(&BsdeProblem::new(ensemble, terminal, &shifted), basis, opts)?.y0())
    };
    let mut sensitivity = vec![];
    let mut finite_difference = vec![];
    for &j in coords {
        finite_difference.push((y0_at(j, h)? - y0_at(j, -h)?) / (2.0 * h));
        sensitivity.push(sens.grad_y0()[j]);
    }
    // Errors are relative to the largest checked component, so coordinates
    // with near-zero gradients are judged on the gradient's own scale.
    let scale = sensitivity
        .iter()
        .chain(&finite_difference)
        .fold(FD_ATOL, |m: f64, v| m.max(v.abs()));
    let max_relative_error = sensitivity
        .iter()
        .zip(&finite_difference)
        .map(|(s, f)| (s - f).abs() / scale)
        .fold(0.0, f64::max);
    Ok(FdReport {
        coords: coords.to_vec(),
        sensitivity,
        finite_difference,
        max_relative_error,
    })
}
