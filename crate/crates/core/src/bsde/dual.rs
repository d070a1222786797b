//! Lower bounds on `Y0` from the change-of-measure representation of a
//! convex, `y`-independent driver.

use rayon::prelude::*;

use super::oracle::log_sum_exp;
use super::terminal::Terminal;
use crate::error::{Error, Result};
use crate::nets::{verify_convexity, AnyDriver, BuiltinKind, Driver};
use crate::stochastic::PathEnsemble;

/// Grid for the numerical conjugate of network drivers (`d = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateGrid {
    pub z_max: f64,
    pub points: usize,
}

impl Default for ConjugateGrid {
    fn default() -> Self {
        ConjugateGrid {
            z_max: 20.0,
            points: 801,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualReport {
    /// `value(u)` for each control, `-inf` where the conjugate is infinite.
    pub values: Vec<f64>,
    pub best: f64,
    pub argmax: Vec<f64>,
}

/// `g(u) = inf_z (f(z) - u . z)` in closed form for built-in drivers.
/// `None` means `g(u) = -inf`.
fn builtin_conjugate(kind: BuiltinKind, params: &[f64], u: &[f64]) -> Result<Option<f64>> {
    let u2: f64 = u.iter().map(|v| v * v).sum();
    let at_zero = u.iter().all(|v| *v == 0.0);
    let curvature = match kind {
        BuiltinKind::Zero => 0.0,
        BuiltinKind::Entropic => -params[0],
        BuiltinKind::ConvexQuadratic => params[0],
        BuiltinKind::Linear => {
            let hit = u.len() == params.len() && u.iter().zip(params).all(|(a, b)| a == b);
            return Ok(hit.then_some(0.0));
        }
        BuiltinKind::Constant { c } => return Ok(at_zero.then_some(params[0] * c)),
    };
    if curvature < 0.0 {
        return Err(Error::InvalidDriver(
            "driver is concave in z; its conjugate is unbounded".into(),
        ));
    }
    if curvature == 0.0 {
        return Ok(at_zero.then_some(0.0));
    }
    Ok(Some(-u2 / (2.0 * curvature)))
}

/// `inf_z f(t, x, 0, z) - u z` on a uniform grid; the infimum may not sit
/// on the grid boundary.
fn grid_conjugate(driver: &AnyDriver, t: f64, x: &[f64], u: f64, grid: &ConjugateGrid) -> Result<f64> {
    let m = grid.points.max(3);
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for i in 0..m {
        let z = -grid.z_max + 2.0 * grid.z_max * i as f64 / (m - 1) as f64;
        let v = driver.eval(t, x, 0.0, &[z]) - u * z;
        if v < best {
            best = v;
            arg = i;
        }
    }
    if arg == 0 || arg == m - 1 {
        return Err(Error::InvalidDriver(format!(
            "conjugate at u = {u} is unbounded on |z| <= {}",
            grid.z_max
        )));
    }
    Ok(best)
}

fn check_numeric_driver(driver: &AnyDriver) -> Result<()> {
    if driver.z_dim() != Some(1) {
        return Err(Error::InvalidDriver("numerical conjugate needs z dimension 1".into()));
    }
    if !verify_convexity(driver, 2000, 0, 0.0).pass {
        return Err(Error::InvalidDriver("driver is not convex in z".into()));
    }
    let mono = crate::nets::verify_monotone(driver, 2000, 1);
    let neg = crate::nets::verify_monotone(&Negated(driver), 2000, 1);
    if mono.max_dy != 0.0 || neg.max_dy != 0.0 {
        return Err(Error::InvalidDriver("driver depends on y".into()));
    }
    Ok(())
}

struct Negated<'a>(&'a AnyDriver);

impl Driver for Negated<'_> {
    fn x_dim(&self) -> Option<usize> {
        self.0.x_dim()
    }
    fn z_dim(&self) -> Option<usize> {
        self.0.z_dim()
    }
    fn params(&self) -> &[f64] {
        self.0.params()
    }
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        -self.0.eval(t, x, y, z)
    }
    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> crate::nets::DriverGradients {
        let mut g = self.0.gradients(t, x, y, z);
        g.value = -g.value;
        g.dy = -g.dy;
        g
    }
    fn with_params(&self, _params: &[f64]) -> Result<Self> {
        Err(Error::InvalidArgument("not supported".into()))
    }
}

/// For each constant control `u`, the value
/// `E^u[xi + sum_k g(t_k, X_k, u) dt]` under the self-normalized weights
/// `exp(u . W_T)`; returns the best bound (ties go to the smallest `|u|`).
pub fn dual_lower_bound(
    ensemble: &PathEnsemble,
    terminal: &Terminal,
    driver: &AnyDriver,
    controls: &[Vec<f64>],
    grid: &ConjugateGrid,
) -> Result<DualReport> {
    if controls.is_empty() {
        return Err(Error::InvalidArgument("control grid is empty".into()));
    }
    let d = ensemble.noise_dim();
    if controls.iter().any(|u| u.len() != d) {
        return Err(Error::InvalidArgument(format!("controls must have dimension {d}")));
    }
    if let AnyDriver::Net(_) = driver {
        check_numeric_driver(driver)?;
    }
    let xi = terminal.values(ensemble);
    let np = ensemble.n_paths();
    let n = ensemble.n_steps();
    let g = ensemble.grid();
    let w_t: Vec<Vec<f64>> = (0..np).map(|p| ensemble.bundle().terminal(p)).collect();
    let mut values = Vec::with_capacity(controls.len());
    for u in controls {
        let running: Option<Vec<f64>> = match driver {
            AnyDriver::Builtin(b) => builtin_conjugate(b.kind(), b.params(), u)?.map(|gu| vec![g.horizon() * gu; np]),
            AnyDriver::Net(_) => Some(
                (0..np)
                    .into_par_iter()
                    .map(|p| {
                        (0..n)
                            .map(|k| grid_conjugate(driver, g.time(k), ensemble.state(p, k), u[0], grid))
                            .sum::<Result<f64>>()
                            .map(|s| s * g.dt())
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
        };
        let Some(running) = running else {
            values.push(f64::NEG_INFINITY);
            continue;
        };
        let logw: Vec<f64> = w_t.iter().map(|w| u.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
        let lse = log_sum_exp(&logw);
        let v: f64 = (0..np).map(|p| (logw[p] - lse).exp() * (xi[p] + running[p])).sum();
        values.push(v);
    }
    let norm = |u: &[f64]| u.iter().map(|v| v * v).sum::<f64>();
    let mut best_i = 0;
    for i in 1..values.len() {
        let (v, b) = (values[i], values[best_i]);
        if v > b || (v == b && norm(&controls[i]) < norm(&controls[best_i])) {
            best_i = i;
        }
    }
    Ok(DualReport {
        best: values[best_i],
        argmax: controls[best_i].clone(),
        values,
    })
}
