use std::fmt::Write as _;

use super::model::{InitialLaw, MeanFieldModel};
use super::particles::{
    simulate_cloud, solve_mckean_vlasov, CloudSpec, FixedPointOptions, MeanFieldSolution, ParticleRun,
};
use crate::bsde::{RegressionBasis, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, derive_seed, Stream};
use crate::stochastic::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub n_trials: usize,
    /// Particles in the cloud approximating the McKean-Vlasov law.
    pub cloud_size: usize,
    pub solver: SolverOptions,
    pub fixed_point: FixedPointOptions,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            n_trials: 20,
            cloud_size: 8192,
            solver: SolverOptions::default(),
            fixed_point: FixedPointOptions::default(),
        }
    }
}

fn check_n_list(n_list: &[usize], opts: &ExperimentOptions) -> Result<()> {
    if n_list.len() < 2 {
        return Err(Error::InvalidArgument("N list needs at least 2 entries".into()));
    }
    if n_list[0] < 2 || n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "N list must be strictly increasing and start at 2 or more, got {n_list:?}"
        )));
    }
    if opts.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    Ok(())
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_indexed(seed, "trial", trial as u64)
}

/// Mean over particles of `sup |dX|^2`, `sup |dY|^2` and `sum |dZ|^2 dt`
/// between two runs on the same noise.
pub fn coupled_errors(a: &ParticleRun, b: &ParticleRun) -> Result<(f64, f64, f64)> {
    if a.n_particles() != b.n_particles() || a.grid() != b.grid() {
        return Err(Error::InvalidArgument(
            "coupled runs must share particles and grid".into(),
        ));
    }
    let n = a.grid().n_steps();
    let dt = a.grid().dt();
    let np = a.n_particles();
    let (mut ex, mut ey, mut ez) = (0.0, 0.0, 0.0);
    for p in 0..np {
        let sx = (0..=n).map(|k| (a.x(p, k) - b.x(p, k)).powi(2)).fold(0.0, f64::max);
        let sy = (0..=n).map(|k| (a.y(p, k) - b.y(p, k)).powi(2)).fold(0.0, f64::max);
        let iz: f64 = (0..n).map(|k| (a.z(p, k) - b.z(p, k)).powi(2) * dt).sum();
        ex += sx;
        ey += sy;
        ez += iz;
    }
    let m = np as f64;
    Ok((ex / m, ey / m, ez / m))
}

/// Least-squares slope of `log y` on `log x`; `None` unless every value is
/// positive and finite.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || x.iter().chain(y).any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlnRow {
    pub n: usize,
    pub trial: usize,
    pub error_x: f64,
    pub error_y: f64,
    pub error_z: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlnSummary {
    pub n: usize,
    pub error_x: f64,
    pub error_y: f64,
    pub error_z: f64,
    /// Mean over trials of the total coupled error.
    pub error: f64,
    /// Standard error of `error` across trials.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlnTable {
    pub rows: Vec<LlnRow>,
    pub summary: Vec<LlnSummary>,
    /// Fitted log-log slope of the total error against `N`.
    pub slope: Option<f64>,
    pub mean_field_iterations: usize,
}

impl LlnTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,trial,error_X,error_Y,error_Z,error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.n, r.trial, r.error_x, r.error_y, r.error_z, r.error
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let slope = self.slope.map_or(String::new(), |v| v.to_string());
        let mut s = String::from("N,error_X,error_Y,error_Z,error,std_error,slope\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{slope}",
                r.n, r.error_x, r.error_y, r.error_z, r.error, r.std_error
            );
        }
        s
    }
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Propagation-of-chaos experiment. The McKean-Vlasov flow is solved once;
/// then, for every `N` and trial, the interacting system and `N` copies that
/// follow the limit flow are run on the same per-particle noise and initial
/// draws and compared path by path.
pub fn lln_experiment(
    model: &MeanFieldModel,
    n_list: &[usize],
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    opts: &ExperimentOptions,
) -> Result<LlnTable> {
    check_n_list(n_list, opts)?;
    let mv = mean_field_for(model, grid, seed, basis, opts)?;
    let mut rows = vec![];
    let mut summary = vec![];
    for &n in n_list {
        let labels: Vec<u64> = (0..n as u64).collect();
        let mut errs = vec![];
        for trial in 0..opts.n_trials {
            let spec = CloudSpec {
                seed: trial_seed(seed, trial),
                labels: &labels,
                antithetic: false,
                x0_shift: None,
            };
            let particles = ParticleRun::build(model, grid, &spec, None, basis, &opts.solver)?;
            let copies = ParticleRun::build(model, grid, &spec, Some(&mv.flow), basis, &opts.solver)?;
            let (ex, ey, ez) = coupled_errors(&particles, &copies)?;
            let row = LlnRow {
                n,
                trial,
                error_x: ex,
                error_y: ey,
                error_z: ez,
                error: ex + ey + ez,
            };
            errs.push(row.clone());
            rows.push(row);
        }
        let col = |f: fn(&LlnRow) -> f64| errs.iter().map(f).collect::<Vec<f64>>();
        let (error, std_error) = mean_and_se(&col(|r| r.error));
        summary.push(LlnSummary {
            n,
            error_x: mean_and_se(&col(|r| r.error_x)).0,
            error_y: mean_and_se(&col(|r| r.error_y)).0,
            error_z: mean_and_se(&col(|r| r.error_z)).0,
            error,
            std_error,
        });
    }
    let xs: Vec<f64> = summary.iter().map(|s| s.n as f64).collect();
    let ys: Vec<f64> = summary.iter().map(|s| s.error).collect();
    Ok(LlnTable {
        rows,
        summary,
        slope: log_log_slope(&xs, &ys),
        mean_field_iterations: mv.iterations,
    })
}

fn mean_field_for(
    model: &MeanFieldModel,
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    opts: &ExperimentOptions,
) -> Result<MeanFieldSolution> {
    solve_mckean_vlasov(
        model,
        opts.cloud_size,
        grid,
        derive_seed(seed, "mckean-vlasov"),
        basis,
        &opts.solver,
        &opts.fixed_point,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CltRow {
    pub n: usize,
    pub trial: usize,
    /// Variance across particles of `U_T = sqrt(N) (X_T - Xbar_T)`.
    pub var_u: f64,
    /// Variance across particles of `V_T = sqrt(N) (Y_T - Ybar_T)`.
    pub var_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CltSummary {
    pub n: usize,
    /// Variance of `U_T` pooled over particles and trials.
    pub var_u: f64,
    pub var_v: f64,
    /// `|var_u(N) - var_u(N_prev)|`, absent for the first `N`.
    pub gap_u: Option<f64>,
    pub gap_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CltTable {
    pub rows: Vec<CltRow>,
    pub summary: Vec<CltSummary>,
}

impl CltTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("N,trial,var_U,var_V\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.n, r.trial, r.var_u, r.var_v);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = String::from("N,var_U,var_V,gap_U,gap_V\n");
        for r in &self.summary {
            let _ = writeln!(s, "{},{},{},{},{}", r.n, r.var_u, r.var_v, opt(r.gap_u), opt(r.gap_v));
        }
        s
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Fluctuation experiment. Each interacting particle starts at its limit
/// copy's initial point plus `U_0 / sqrt(N)` with `U_0 ~ u0`, and both run
/// on the same noise; the terminal `sqrt(N)`-scaled gaps are collected.
/// Particles are exchangeable, so their fluctuations are pooled over
/// particles as well as trials.
pub fn clt_experiment(
    model: &MeanFieldModel,
    n_list: &[usize],
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    u0: InitialLaw,
    opts: &ExperimentOptions,
) -> Result<CltTable> {
    check_n_list(n_list, opts)?;
    let mv = mean_field_for(model, grid, seed, basis, opts)?;
    let nt = grid.n_steps();
    let mut rows = vec![];
    let mut summary: Vec<CltSummary> = vec![];
    for &n in n_list {
        let labels: Vec<u64> = (0..n as u64).collect();
        let scale = (n as f64).sqrt();
        let mut pooled_u = Vec::with_capacity(n * opts.n_trials);
        let mut pooled_v = Vec::with_capacity(n * opts.n_trials);
        for trial in 0..opts.n_trials {
            let ts = trial_seed(seed, trial);
            let useed = derive_seed(ts, "u0");
            let shift: Vec<f64> = labels
                .iter()
                .map(|&l| u0.sample(Stream::new(useed, l).normal()) / scale)
                .collect();
            let copy_spec = CloudSpec {
                seed: ts,
                labels: &labels,
                antithetic: false,
                x0_shift: None,
            };
            let part_spec = CloudSpec {
                x0_shift: Some(&shift),
                ..copy_spec.clone()
            };
            let (xp, _, emp) = simulate_cloud(model, grid, &part_spec, None)?;
            let (xc, _, _) = simulate_cloud(model, grid, &copy_spec, Some(&mv.flow))?;
            let (mp, mc) = (emp.at(nt), mv.flow.at(nt));
            let mut us = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            for p in 0..n {
                let (a, b) = (xp.state(p, nt)[0], xc.state(p, nt)[0]);
                us.push(scale * (a - b));
                vs.push(scale * (model.terminal(a, mp) - model.terminal(b, mc)));
            }
            rows.push(CltRow {
                n,
                trial,
                var_u: variance(&us),
                var_v: variance(&vs),
            });
            pooled_u.extend(us);
            pooled_v.extend(vs);
        }
        let (var_u, var_v) = (variance(&pooled_u), variance(&pooled_v));
        let prev = summary.last();
        summary.push(CltSummary {
            n,
            var_u,
            var_v,
            gap_u: prev.map(|p| (var_u - p.var_u).abs()),
            gap_v: prev.map(|p| (var_v - p.var_v).abs()),
        });
    }
    Ok(CltTable { rows, summary })
}
