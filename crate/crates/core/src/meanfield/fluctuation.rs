use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use super::model::InitialLaw;
use super::particles::{simulate_cloud, solve_cloud_backward, CloudSpec, MeanFieldSolution};
use crate::bsde::solver::continuation_and_z;
use crate::bsde::{RegressionBasis, Regressor, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};
use crate::stochastic::PathEnsemble;

type StateFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;
type PairFn = Arc<dyn Fn(f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
type DriverDerivFn = Arc<dyn Fn(f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
type DriverPairFn = Arc<dyn Fn(f64, f64, f64, f64, f64, &[f64]) -> f64 + Send + Sync>;
type TermFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type TermPairFn = Arc<dyn Fn(f64, f64, &[f64]) -> f64 + Send + Sync>;

/// Derivatives of the coefficients along the mean-field path, supplied by
/// the caller. `m` is the feature vector of the limit law; measure
/// derivatives take the copy's state `x'` after `x`:
///
/// - `dx_b(t, x, m)`, `dmu_b(t, x, x', m)`, and the same for `sigma`
/// - `dx_f`, `dy_f`, `dz_f` as `(t, x, y, z, m)`, `dmu_f(t, x, y, z, x', m)`
/// - `dx_g(x, m)`, `dmu_g(x, x', m)`
#[derive(Clone, Default)]
pub struct FluctuationCoefficients {
    dx_b: Option<StateFn>,
    dmu_b: Option<PairFn>,
    dx_sigma: Option<StateFn>,
    dmu_sigma: Option<PairFn>,
    dx_f: Option<DriverDerivFn>,
    dy_f: Option<DriverDerivFn>,
    dz_f: Option<DriverDerivFn>,
    dmu_f: Option<DriverPairFn>,
    dx_g: Option<TermFn>,
    dmu_g: Option<TermPairFn>,
}

impl std::fmt::Debug for FluctuationCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FluctuationCoefficients(missing: {:?})", self.missing())
    }
}

macro_rules! setter {
    ($name:ident, $($arg:ty),+) => {
        pub fn $name(mut self, g: impl Fn($($arg),+) -> f64 + Send + Sync + 'static) -> Self {
            self.$name = Some(Arc::new(g));
            self
        }
    };
}

impl FluctuationCoefficients {
    pub fn new() -> Self {
        Self::default()
    }

    setter!(dx_b, f64, f64, &[f64]);
    setter!(dmu_b, f64, f64, f64, &[f64]);
    setter!(dx_sigma, f64, f64, &[f64]);
    setter!(dmu_sigma, f64, f64, f64, &[f64]);
    setter!(dx_f, f64, f64, f64, f64, &[f64]);
    setter!(dy_f, f64, f64, f64, f64, &[f64]);
    setter!(dz_f, f64, f64, f64, f64, &[f64]);
    setter!(dmu_f, f64, f64, f64, f64, f64, &[f64]);
    setter!(dx_g, f64, &[f64]);
    setter!(dmu_g, f64, f64, &[f64]);

    /// Names of the callbacks not yet supplied.
    pub fn missing(&self) -> Vec<&'static str> {
        let mut m = vec![];
        let mut check = |set: bool, name| {
            if !set {
                m.push(name);
            }
        };
        check(self.dx_b.is_some(), "dx_b");
        check(self.dmu_b.is_some(), "dmu_b");
        check(self.dx_sigma.is_some(), "dx_sigma");
        check(self.dmu_sigma.is_some(), "dmu_sigma");
        check(self.dx_f.is_some(), "dx_f");
        check(self.dy_f.is_some(), "dy_f");
        check(self.dz_f.is_some(), "dz_f");
        check(self.dmu_f.is_some(), "dmu_f");
        check(self.dx_g.is_some(), "dx_g");
        check(self.dmu_g.is_some(), "dmu_g");
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationOptions {
    /// Paths in the independent copy cloud that carries the `E'` averages.
    pub copy_paths: usize,
    pub solver: SolverOptions,
}

impl Default for FluctuationOptions {
    fn default() -> Self {
        FluctuationOptions {
            copy_paths: 512,
            solver: SolverOptions::default(),
        }
    }
}

/// Ensembles of the limiting fluctuation system.
#[derive(Debug, Clone)]
pub struct FluctuationSolution {
    n_steps: usize,
    dt: f64,
    /// `[step][path]`
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    zeta: Vec<Vec<f64>>,
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

impl FluctuationSolution {
    pub fn n_paths(&self) -> usize {
        self.u[0].len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn u(&self, path: usize, step: usize) -> f64 {
        self.u[step][path]
    }

    pub fn v(&self, path: usize, step: usize) -> f64 {
        self.v[step][path]
    }

    /// Martingale integrand; defined for steps `0..n`.
    pub fn zeta(&self, path: usize, step: usize) -> f64 {
        self.zeta[step][path]
    }

    pub fn u_step(&self, step: usize) -> &[f64] {
        &self.u[step]
    }

    pub fn v_step(&self, step: usize) -> &[f64] {
        &self.v[step]
    }

    pub fn zeta_step(&self, step: usize) -> &[f64] {
        &self.zeta[step]
    }

    /// Mean of `V_0` over paths.
    pub fn v0(&self) -> f64 {
        self.v[0].iter().sum::<f64>() / self.n_paths() as f64
    }

    pub fn var_u_terminal(&self) -> f64 {
        sample_variance(&self.u[self.n_steps])
    }

    pub fn var_v_terminal(&self) -> f64 {
        sample_variance(&self.v[self.n_steps])
    }

    /// Rows `path,step,t,U,V,Zeta`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,step,t,U,V,Zeta\n");
        for p in 0..self.n_paths() {
            for k in 0..=self.n_steps {
                let z = if k < self.n_steps {
                    self.zeta[k][p].to_string()
                } else {
                    String::new()
                };
                let _ = writeln!(
                    s,
                    "{p},{k},{},{},{},{z}",
                    k as f64 * self.dt,
                    self.u[k][p],
                    self.v[k][p]
                );
            }
        }
        s
    }
}

/// Solves the linear fluctuation FBSDE around a converged mean-field
/// solution.
///
/// Two clouds of limit particles are simulated under the fixed-point flow:
/// the main cloud (`n_paths`) and an independent copy cloud whose pairs
/// `(X', U')` supply every `E'[...]` average, the copy cloud using its own
/// average. `U` is stepped forward by Euler; `(V, Zeta)` come from a
/// backward regression on `(Xbar, U)`.
pub fn solve_fluctuation_system(
    coeffs: &FluctuationCoefficients,
    mean_field: &MeanFieldSolution,
    u0: InitialLaw,
    n_paths: usize,
    seed: u64,
    basis: RegressionBasis,
    opts: &FluctuationOptions,
) -> Result<FluctuationSolution> {
    let missing = coeffs.missing();
    if !missing.is_empty() {
        return Err(Error::IncompleteCoefficients(missing.join(", ")));
    }
    if n_paths < 2 || opts.copy_paths < 2 {
        return Err(Error::InvalidArgument(
            "fluctuation clouds need at least 2 paths".into(),
        ));
    }
    let (dx_b, dmu_b) = (coeffs.dx_b.as_ref().unwrap(), coeffs.dmu_b.as_ref().unwrap());
    let (dx_s, dmu_s) = (coeffs.dx_sigma.as_ref().unwrap(), coeffs.dmu_sigma.as_ref().unwrap());
    let (dx_f, dy_f, dz_f) = (
        coeffs.dx_f.as_ref().unwrap(),
        coeffs.dy_f.as_ref().unwrap(),
        coeffs.dz_f.as_ref().unwrap(),
    );
    let dmu_f = coeffs.dmu_f.as_ref().unwrap();
    let (dx_g, dmu_g) = (coeffs.dx_g.as_ref().unwrap(), coeffs.dmu_g.as_ref().unwrap());

    let model = mean_field.model();
    let flow = &mean_field.flow;
    let grid = mean_field.grid().clone();
    let n = grid.n_steps();
    let dt = grid.dt();

    let labels_a: Vec<u64> = (0..n_paths as u64).collect();
    let labels_b: Vec<u64> = (0..opts.copy_paths as u64).collect();
    let spec_a = CloudSpec {
        seed: derive_seed(seed, "main"),
        labels: &labels_a,
        antithetic: false,
        x0_shift: None,
    };
    let spec_b = CloudSpec {
        seed: derive_seed(seed, "copy"),
        labels: &labels_b,
        antithetic: false,
        x0_shift: None,
    };
    let (ens_a, _, _) = simulate_cloud(model, &grid, &spec_a, Some(flow))?;
    let (ens_b, _, _) = simulate_cloud(model, &grid, &spec_b, Some(flow))?;
    let bar = solve_cloud_backward(model, &ens_a, flow, basis, &opts.solver)?;

    let draw_u0 = |spec: &CloudSpec<'_>| -> Vec<f64> {
        let useed = derive_seed(spec.seed, "u0");
        spec.labels
            .iter()
            .map(|&l| u0.sample(Stream::new(useed, l).normal()))
            .collect()
    };
    let xa = |p: usize, k: usize| ens_a.state(p, k)[0];
    let xb = |p: usize, k: usize| ens_b.state(p, k)[0];
    let nb = opts.copy_paths;
    let mb = nb as f64;

    let mut u = Vec::with_capacity(n + 1);
    let mut ub = Vec::with_capacity(n + 1);
    u.push(draw_u0(&spec_a));
    ub.push(draw_u0(&spec_b));
    for k in 0..n {
        let t = grid.time(k);
        let m = flow.at(k);
        let (cur, cur_b) = (&u[k], &ub[k]);
        // E'[D_mu b(x, X') U'] and its sigma counterpart at state x.
        let copy_terms = |x: f64| -> (f64, f64) {
            let mut eb = 0.0;
            let mut es = 0.0;
            for l in 0..nb {
                let xl = xb(l, k);
                eb += dmu_b(t, x, xl, m) * cur_b[l];
                es += dmu_s(t, x, xl, m) * cur_b[l];
            }
            (eb / mb, es / mb)
        };
        let step = |x: f64, u: f64, dw: f64| {
            let (eb, es) = copy_terms(x);
            u + (dx_b(t, x, m) * u + eb) * dt + (dx_s(t, x, m) * u + es) * dw
        };
        let next: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| step(xa(p, k), cur[p], ens_a.bundle().dw(p, k)[0]))
            .collect();
        let next_b: Vec<f64> = (0..nb)
            .into_par_iter()
            .map(|p| step(xb(p, k), cur_b[p], ens_b.bundle().dw(p, k)[0]))
            .collect();
        if let Some(p) = next.iter().chain(&next_b).position(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { path: p, step: k + 1 });
        }
        u.push(next);
        ub.push(next_b);
    }

    // Backward pass on the joint state (Xbar, U).
    let mut joint = vec![0.0; n_paths * (n + 1) * 2];
    for p in 0..n_paths {
        for k in 0..=n {
            let o = (p * (n + 1) + k) * 2;
            joint[o] = xa(p, k);
            joint[o + 1] = u[k][p];
        }
    }
    let ens_j = PathEnsemble::from_states(grid.clone(), ens_a.shared_bundle(), 2, joint)?;
    let mt = flow.at(n);
    let vt: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let x = xa(p, n);
            let e: f64 = (0..nb).map(|l| dmu_g(x, xb(l, n), mt) * ub[n][l]).sum::<f64>() / mb;
            dx_g(x, mt) * u[n][p] + e
        })
        .collect();
    let mut v = vec![Vec::new(); n + 1];
    let mut zeta = vec![Vec::new(); n];
    v[n] = vt;
    for k in (0..n).rev() {
        let t = grid.time(k);
        let m = flow.at(k);
        let states: Vec<f64> = (0..n_paths).flat_map(|p| [xa(p, k), u[k][p]]).collect();
        let reg = Regressor::new(basis, &states, 2, k)?;
        let (c, mut zc) = continuation_and_z(&reg.design(&states, 2), &ens_j, k, &v[k + 1]);
        let z = zc.swap_remove(0);
        let iters = opts.solver.inner_picard_iters;
        let vk: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let x = xa(p, k);
                let (yb, zb) = (bar.y(p, k), bar.z(p, k)[0]);
                let e: f64 = (0..nb)
                    .map(|l| dmu_f(t, x, yb, zb, xb(l, k), m) * ub[k][l])
                    .sum::<f64>()
                    / mb;
                let src = dx_f(t, x, yb, zb, m) * u[k][p] + e + dz_f(t, x, yb, zb, m) * z[p];
                let fy = dy_f(t, x, yb, zb, m);
                let mut vt = c[p];
                for _ in 0..iters {
                    vt = c[p] + dt * (src + fy * vt);
                }
                c[p] + dt * (src + fy * vt)
            })
            .collect();
        if vk.iter().any(|x| !x.is_finite()) {
            return Err(Error::SolverDiverged { step: k });
        }
        v[k] = vk;
        zeta[k] = z;
    }
    Ok(FluctuationSolution {
        n_steps: n,
        dt,
        u,
        v,
        zeta,
    })
}
