use std::fmt::Write as _;

use rayon::prelude::*;

use super::regression::{Design, RegressionBasis, Regressor};
use super::terminal::Terminal;
use crate::error::{Error, Result};
use crate::nets::Driver;
use crate::stochastic::{CouplingField, PathEnsemble, TimeGrid};

/// Outlier guard applied to regressed `Z` before the driver sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZClip {
    None,
    /// Clip to `median +- k * IQR`, per step and coordinate.
    Iqr(f64),
    /// Clip to `[-c, c]`.
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Fixed-point passes for the implicit dependence on `y`.
    pub inner_picard_iters: usize,
    pub z_clip: ZClip,
    /// Clamp level `k` for `xi` and the driver's `y` argument.
    pub truncation: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            inner_picard_iters: 2,
            z_clip: ZClip::Iqr(10.0),
            truncation: None,
        }
    }
}

/// A BSDE on a simulated ensemble: terminal functional and driver.
#[derive(Clone, Copy)]
pub struct BsdeProblem<'a> {
    pub ensemble: &'a PathEnsemble,
    pub terminal: &'a Terminal,
    pub driver: &'a dyn Driver,
}

impl<'a> BsdeProblem<'a> {
    pub fn new(ensemble: &'a PathEnsemble, terminal: &'a Terminal, driver: &'a dyn Driver) -> Self {
        BsdeProblem {
            ensemble,
            terminal,
            driver,
        }
    }

    pub fn with_terminal<'b>(&self, terminal: &'b Terminal) -> BsdeProblem<'b>
    where
        'a: 'b,
    {
        BsdeProblem {
            ensemble: self.ensemble,
            terminal,
            driver: self.driver,
        }
    }
}

/// Discrete solution of a BSDE. Per-step arrays are indexed `[step][path]`
/// (Z: `[step][path * d + j]`); Z and the regression data exist for steps
/// `0..n`, Y for `0..=n`.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    n_paths: usize,
    noise_dim: usize,
    state_dim: usize,
    y: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    ytilde: Vec<Vec<f64>>,
    fvals: Vec<Vec<f64>>,
    clipped: Vec<Vec<bool>>,
    clip_counts: Vec<usize>,
    regressors: Vec<Regressor>,
    y0: f64,
    z0: Vec<f64>,
    mc_std_error: f64,
    max_abs_y: f64,
    options: SolverOptions,
}

pub(crate) fn state_slice(ens: &PathEnsemble, step: usize) -> Vec<f64> {
    let n = ens.state_dim();
    let mut out = Vec::with_capacity(ens.n_paths() * n);
    for p in 0..ens.n_paths() {
        out.extend_from_slice(ens.state(p, step));
    }
    out
}

/// Regressed continuation `c` and unclipped `Z` columns (`[coordinate][path]`) at step `k`.
pub(crate) fn continuation_and_z(
    design: &Design<'_>,
    ens: &PathEnsemble,
    k: usize,
    ynext: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let np = ens.n_paths();
    let dt = ens.grid().dt();
    let c = design.predict(&design.fit(&[ynext])).swap_remove(0);
    // Martingale increment as the Z target: subtracting the continuation
    // leaves the conditional mean unchanged and removes most of the variance.
    let targets: Vec<Vec<f64>> = (0..ens.noise_dim())
        .map(|j| (0..np).map(|p| (ynext[p] - c[p]) * ens.bundle().dw(p, k)[j]).collect())
        .collect();
    let trefs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
    let mut z = design.predict(&design.fit(&trefs));
    for col in &mut z {
        for v in col.iter_mut() {
            *v /= dt;
        }
    }
    (c, z)
}

/// Linear-interpolated quantile as `(lower path, upper path, weight on upper)`.
fn quantile_terms(values: &[f64], idx: &mut [usize], q: f64) -> (usize, usize, f64) {
    let pos = q * (values.len() - 1) as f64;
    let a = pos.floor() as usize;
    let b = pos.ceil() as usize;
    let cmp = |i: &usize, j: &usize| values[*i].total_cmp(&values[*j]);
    idx.select_nth_unstable_by(a, cmp);
    let lo = idx[a];
    let hi = if b == a {
        lo
    } else {
        *idx[a + 1..].iter().min_by(|i, j| cmp(i, j)).unwrap()
    };
    (lo, hi, pos - a as f64)
}

fn quantile(values: &[f64], idx: &mut [usize], q: f64) -> f64 {
    let (lo, hi, w) = quantile_terms(values, idx, q);
    values[lo] + w * (values[hi] - values[lo])
}

pub(crate) fn clip_bounds(values: &[f64], clip: ZClip) -> Option<(f64, f64)> {
    match clip {
        ZClip::None => None,
        ZClip::Absolute(c) => Some((-c, c)),
        ZClip::Iqr(k) => {
            let mut idx: Vec<usize> = (0..values.len()).collect();
            let med = quantile(values, &mut idx, 0.5);
            let iqr = quantile(values, &mut idx, 0.75) - quantile(values, &mut idx, 0.25);
            Some((med - k * iqr, med + k * iqr))
        }
    }
}

/// Clip bounds together with their sensitivities: each term `(path, a_lo, a_hi)`
/// says the lower (upper) bound moves by `a_lo` (`a_hi`) times that path's value.
pub(crate) struct ClipLinear {
    pub lo: f64,
    pub hi: f64,
    pub terms: Vec<(usize, f64, f64)>,
}

pub(crate) fn clip_bounds_linear(values: &[f64], clip: ZClip) -> Option<ClipLinear> {
    match clip {
        ZClip::None => None,
        ZClip::Absolute(c) => Some(ClipLinear {
            lo: -c,
            hi: c,
            terms: vec![],
        }),
        ZClip::Iqr(k) => {
            let (lo, hi) = clip_bounds(values, clip)?;
            let mut idx: Vec<usize> = (0..values.len()).collect();
            let mut terms = vec![];
            // (quantile, weight in lower bound, weight in upper bound)
            for (q, wl, wh) in [(0.5, 1.0, 1.0), (0.75, -k, k), (0.25, k, -k)] {
                let (a, b, w) = quantile_terms(values, &mut idx, q);
                terms.push((a, wl * (1.0 - w), wh * (1.0 - w)));
                terms.push((b, wl * w, wh * w));
            }
            Some(ClipLinear { lo, hi, terms })
        }
    }
}

fn check_problem(p: &BsdeProblem<'_>, opts: &SolverOptions) -> Result<()> {
    let e = p.ensemble;
    if !p.driver.accepts(e.state_dim(), e.noise_dim()) {
        return Err(Error::InvalidArgument(format!(
            "driver does not accept state dimension {} and noise dimension {}",
            e.state_dim(),
            e.noise_dim()
        )));
    }
    if let Some(k) = opts.truncation {
        if !(k > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "truncation level must be positive, got {k}"
            )));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn clamp_opt(v: f64, k: Option<f64>) -> f64 {
    match k {
        Some(k) => v.clamp(-k, k),
        None => v,
    }
}

/// Backward least-squares Monte Carlo solve.
///
/// At each step the continuation value `c = E[Y_{k+1} | X_k]` and
/// `Z_k = E[(Y_{k+1} - c) dW_k | X_k] / dt` are regressed on the polynomial basis;
/// then `Y_k = c + dt f(t_k, X_k, Y~, Z_k)` where `Y~` starts at `c` and is
/// refined by `inner_picard_iters` passes of the same map.
pub fn solve_bsde_lsmc(
    problem: &BsdeProblem<'_>,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<BsdeSolution> {
    check_problem(problem, opts)?;
    let ens = problem.ensemble;
    let driver = problem.driver;
    let grid = ens.grid().clone();
    let n = grid.n_steps();
    let dt = grid.dt();
    let np = ens.n_paths();
    let d = ens.noise_dim();
    let sd = ens.state_dim();
    let trunc = opts.truncation;

    let xi: Vec<f64> = problem
        .terminal
        .values(ens)
        .into_iter()
        .map(|v| clamp_opt(v, trunc))
        .collect();
    if let Some(p) = xi.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "terminal value is not finite on path {p}"
        )));
    }

    let mut y = vec![Vec::new(); n + 1];
    let mut z = vec![Vec::new(); n];
    let mut ytilde = vec![Vec::new(); n];
    let mut fvals = vec![Vec::new(); n];
    let mut clipped = vec![Vec::new(); n];
    let mut clip_counts = vec![0; n];
    let mut regressors = Vec::with_capacity(n);
    y[n] = xi;

    for k in (0..n).rev() {
        let xk = state_slice(ens, k);
        let reg = Regressor::new(basis, &xk, sd, k)?;
        let ynext = &y[k + 1];
        let (c, fitted) = continuation_and_z(&reg.design(&xk, sd), ens, k, ynext);
        let c = &c;

        let mut zk = vec![0.0; np * d];
        let mut mask = vec![false; np * d];
        let mut count = 0;
        for j in 0..d {
            let col = &fitted[j];
            let bounds = clip_bounds(col, opts.z_clip);
            for p in 0..np {
                let mut v = col[p];
                if let Some((lo, hi)) = bounds {
                    let cl = v.clamp(lo, hi);
                    if cl != v {
                        mask[p * d + j] = true;
                        count += 1;
                        v = cl;
                    }
                }
                zk[p * d + j] = v;
            }
        }

        let t = grid.time(k);
        let rows: Vec<(f64, f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let x = &xk[p * sd..(p + 1) * sd];
                let zp = &zk[p * d..(p + 1) * d];
                let mut yt = c[p];
                for _ in 0..opts.inner_picard_iters {
                    yt = c[p] + dt * driver.eval(t, x, clamp_opt(yt, trunc), zp);
                }
                let f = driver.eval(t, x, clamp_opt(yt, trunc), zp);
                (c[p] + dt * f, yt, f)
            })
            .collect();
        if rows.iter().any(|r| !r.0.is_finite()) {
            return Err(Error::SolverDiverged { step: k });
        }
        y[k] = rows.iter().map(|r| r.0).collect();
        ytilde[k] = rows.iter().map(|r| r.1).collect();
        fvals[k] = rows.iter().map(|r| r.2).collect();
        z[k] = zk;
        clipped[k] = mask;
        clip_counts[k] = count;
        regressors.push(reg);
    }
    regressors.reverse();

    let y0 = y[0].iter().sum::<f64>() / np as f64;
    let z0 = (0..d)
        .map(|j| (0..np).map(|p| z[0][p * d + j]).sum::<f64>() / np as f64)
        .collect();
    let naive: Vec<f64> = (0..np)
        .map(|p| y[n][p] + dt * (0..n).map(|k| fvals[k][p]).sum::<f64>())
        .collect();
    let mc_std_error = std_dev(&naive) / (np as f64).sqrt();
    let max_abs_y = y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    Ok(BsdeSolution {
        grid,
        n_paths: np,
        noise_dim: d,
        state_dim: sd,
        y,
        z,
        ytilde,
        fvals,
        clipped,
        clip_counts,
        regressors,
        y0,
        z0,
        mc_std_error,
        max_abs_y,
        options: opts.clone(),
    })
}

/// Solve with `xi` and the driver's `y` argument clamped to `[-k, k]`.
pub fn solve_truncated(
    problem: &BsdeProblem<'_>,
    k_level: f64,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<BsdeSolution> {
    let opts = SolverOptions {
        truncation: Some(k_level),
        ..opts.clone()
    };
    solve_bsde_lsmc(problem, basis, &opts)
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Value at `t = 0`: the step-0 regression, averaged over paths (all
    /// paths agree when the initial state is deterministic).
    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    /// Standard error of `xi + sum_k f_k dt` across paths, the reported
    /// Monte Carlo noise level of `Y0`.
    pub fn mc_std_error(&self) -> f64 {
        self.mc_std_error
    }

    pub fn max_abs_y(&self) -> f64 {
        self.max_abs_y
    }

    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[step][path]
    }

    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        &self.z[step][path * self.noise_dim..(path + 1) * self.noise_dim]
    }

    pub fn y_step(&self, step: usize) -> &[f64] {
        &self.y[step]
    }

    pub fn z_step(&self, step: usize) -> &[f64] {
        &self.z[step]
    }

    /// The driver's `y` argument at each step (before truncation clamping).
    pub fn ytilde_step(&self, step: usize) -> &[f64] {
        &self.ytilde[step]
    }

    pub fn driver_values_step(&self, step: usize) -> &[f64] {
        &self.fvals[step]
    }

    pub fn clip_mask_step(&self, step: usize) -> &[bool] {
        &self.clipped[step]
    }

    pub fn clip_counts(&self) -> &[usize] {
        &self.clip_counts
    }

    pub fn total_clips(&self) -> usize {
        self.clip_counts.iter().sum()
    }

    pub fn regressor(&self, step: usize) -> &Regressor {
        &self.regressors[step]
    }

    pub fn condition_numbers(&self) -> Vec<f64> {
        self.regressors.iter().map(|r| r.condition_number()).collect()
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    /// CSV summary with one row per step:
    /// `step,t,mean_Y,sd_Y,mean_normZ,clip_count,regression_cond`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,t,mean_Y,sd_Y,mean_normZ,clip_count,regression_cond\n");
        let n = self.n_steps();
        let d = self.noise_dim;
        for k in 0..=n {
            let (mz, clips, cond) = if k < n {
                let norms: Vec<f64> = self.z[k]
                    .chunks(d)
                    .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                (
                    format!("{}", mean(&norms)),
                    self.clip_counts[k].to_string(),
                    format!("{}", self.regressors[k].condition_number()),
                )
            } else {
                (String::new(), String::new(), String::new())
            };
            let _ = writeln!(
                s,
                "{k},{},{},{},{mz},{clips},{cond}",
                self.grid.time(k),
                mean(&self.y[k]),
                std_dev(&self.y[k])
            );
        }
        s
    }

    /// Regressed `Y` and `Z` surfaces as functions of the state at each
    /// step, fitted on the ensemble this solution was computed on.
    pub fn surfaces(&self, ensemble: &PathEnsemble) -> FieldSurfaces {
        let n = self.n_steps();
        let d = self.noise_dim;
        let sd = self.state_dim;
        let mut y_coef = Vec::with_capacity(n);
        let mut z_coef = Vec::with_capacity(n);
        for k in 0..n {
            let xk = state_slice(ensemble, k);
            let mut targets: Vec<Vec<f64>> = vec![self.y[k].clone()];
            for j in 0..d {
                targets.push((0..self.n_paths).map(|p| self.z[k][p * d + j]).collect());
            }
            let trefs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
            let mut c = self.regressors[k].fit(&xk, sd, &trefs);
            let zc = c.split_off(1);
            y_coef.push(c.pop().unwrap_or_default());
            z_coef.push(zc);
        }
        FieldSurfaces {
            regressors: self.regressors.clone(),
            y_coef,
            z_coef,
        }
    }
}

/// Polynomial surfaces `y_k(x)`, `z_k(x)` for steps `0..n`.
#[derive(Debug, Clone)]
pub struct FieldSurfaces {
    regressors: Vec<Regressor>,
    y_coef: Vec<Vec<f64>>,
    z_coef: Vec<Vec<Vec<f64>>>,
}

impl FieldSurfaces {
    pub fn y_at(&self, step: usize, x: &[f64]) -> f64 {
        self.regressors[step].predict(&self.y_coef[step], x)
    }

    pub fn z_at(&self, step: usize, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.z_coef[step]) {
            *o = self.regressors[step].predict(c, x);
        }
    }

    pub fn n_steps(&self) -> usize {
        self.y_coef.len()
    }
}

impl CouplingField for FieldSurfaces {
    fn eval(&self, _path: usize, step: usize, x: &[f64], z: &mut [f64]) -> f64 {
        self.z_at(step, x, z);
        self.y_at(step, x)
    }
}
