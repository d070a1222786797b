use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use super::model::{features_of_sorted, Feature, MeanFieldModel};
use crate::bsde::{solve_bsde_lsmc, BsdeProblem, BsdeSolution, RegressionBasis, SolverOptions, Terminal};
use crate::error::{Error, Result};
use crate::nets::{Driver, DriverGradients};
use crate::rng::{derive_seed, Stream};
use crate::stochastic::{BrownianBundle, PathEnsemble, TimeGrid};

/// Values of the declared features at every grid node, `[step][feature]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFlow {
    features: Vec<Feature>,
    values: Vec<Vec<f64>>,
}

impl FeatureFlow {
    pub fn new(features: Vec<Feature>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| v.len() != features.len()) {
            return Err(Error::InvalidArgument(
                "feature flow rows must match the feature list".into(),
            ));
        }
        Ok(FeatureFlow { features, values })
    }

    /// `values` repeated at every node `0..=n_steps`.
    pub fn constant(features: Vec<Feature>, values: Vec<f64>, n_steps: usize) -> Result<Self> {
        FeatureFlow::new(features, vec![values; n_steps + 1])
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn n_steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn at(&self, step: usize) -> &[f64] {
        &self.values[step]
    }

    /// Trajectory of one feature over the grid.
    pub fn series(&self, feature: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[feature]).collect()
    }

    /// Largest change of any feature at any node.
    pub fn sup_distance(&self, other: &FeatureFlow) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self, grid: &TimeGrid) -> String {
        let mut s = String::from("step,t");
        for f in &self.features {
            let _ = write!(s, ",{}", f.name());
        }
        s.push('\n');
        for (k, row) in self.values.iter().enumerate() {
            let _ = write!(s, "{k},{}", grid.time(k));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// The model's driver with the measure argument frozen along a feature flow.
#[derive(Clone)]
pub(crate) struct FlowDriver<'a> {
    model: &'a MeanFieldModel,
    flow: &'a FeatureFlow,
    dt: f64,
}

impl<'a> FlowDriver<'a> {
    pub(crate) fn new(model: &'a MeanFieldModel, flow: &'a FeatureFlow, grid: &TimeGrid) -> Self {
        FlowDriver {
            model,
            flow,
            dt: grid.dt(),
        }
    }

    fn features_at(&self, t: f64) -> &[f64] {
        let k = ((t / self.dt).round() as usize).min(self.flow.n_steps());
        self.flow.at(k)
    }
}

const FD_STEP: f64 = 1e-6;

impl Driver for FlowDriver<'_> {
    fn x_dim(&self) -> Option<usize> {
        Some(1)
    }

    fn z_dim(&self) -> Option<usize> {
        Some(1)
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        self.model.driver(t, x[0], y, z[0], self.features_at(t))
    }

    // Callback models carry no analytic derivatives; central differences.
    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverGradients {
        let m = self.features_at(t);
        let f = |y: f64, z: f64| self.model.driver(t, x[0], y, z, m);
        let hy = FD_STEP * (1.0 + y.abs());
        let hz = FD_STEP * (1.0 + z[0].abs());
        DriverGradients {
            value: f(y, z[0]),
            dy: (f(y + hy, z[0]) - f(y - hy, z[0])) / (2.0 * hy),
            dz: vec![(f(y, z[0] + hz) - f(y, z[0] - hz)) / (2.0 * hz)],
            dtheta: vec![],
        }
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.is_empty() {
            Ok(self.clone())
        } else {
            Err(Error::InvalidArgument("a frozen-flow driver has no parameters".into()))
        }
    }
}

/// How a cloud of particles draws its randomness.
#[derive(Debug, Clone)]
pub(crate) struct CloudSpec<'a> {
    pub seed: u64,
    /// Stream index of each particle.
    pub labels: &'a [u64],
    /// Pair particles `2j` and `2j + 1` with mirrored draws.
    pub antithetic: bool,
    /// Added to each particle's initial draw.
    pub x0_shift: Option<&'a [f64]>,
}

impl CloudSpec<'_> {
    fn stream_of(&self, label: u64) -> (u64, f64) {
        if self.antithetic {
            (label & !1, if label & 1 == 1 { -1.0 } else { 1.0 })
        } else {
            (label, 1.0)
        }
    }

    pub(crate) fn initial_states(&self, model: &MeanFieldModel) -> Vec<f64> {
        let xseed = derive_seed(self.seed, "x0");
        let law = model.initial_law();
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (base, sign) = self.stream_of(l);
                let x = law.sample(sign * Stream::new(xseed, base).normal());
                x + self.x0_shift.map_or(0.0, |s| s[i])
            })
            .collect()
    }

    fn increments(&self, grid: &TimeGrid) -> Vec<f64> {
        let n = grid.n_steps();
        let sqrt_dt = grid.dt().sqrt();
        let bseed = derive_seed(self.seed, "brownian");
        let mut inc = vec![0.0; self.labels.len() * n];
        inc.par_chunks_mut(n)
            .zip(self.labels.par_iter())
            .for_each(|(chunk, &l)| {
                let (base, sign) = self.stream_of(l);
                let mut s = Stream::new(bseed, base);
                for v in chunk.iter_mut() {
                    *v = sign * sqrt_dt * s.normal();
                }
            });
        inc
    }
}

/// Forward Euler pass of the whole cloud. Each step first reduces the cloud
/// to its empirical features, then moves every particle with either those
/// features or, when `frozen` is given, the frozen flow.
///
/// Returns the ensemble, the flow the dynamics used and the empirical flow.
pub(crate) fn simulate_cloud(
    model: &MeanFieldModel,
    grid: &TimeGrid,
    spec: &CloudSpec<'_>,
    frozen: Option<&FeatureFlow>,
) -> Result<(PathEnsemble, FeatureFlow, FeatureFlow)> {
    let np = spec.labels.len();
    let n = grid.n_steps();
    let dt = grid.dt();
    if let Some(f) = frozen {
        if f.n_steps() != n || f.features() != model.features() {
            return Err(Error::InvalidArgument(
                "frozen flow does not match the grid or the model".into(),
            ));
        }
    }
    let inc = spec.increments(grid);
    let mut cur = spec.initial_states(model);
    let mut states = vec![0.0; np * (n + 1)];
    let mut used = Vec::with_capacity(n + 1);
    let mut empirical = Vec::with_capacity(n + 1);
    let mut sorted = cur.clone();
    for k in 0..=n {
        for (p, &x) in cur.iter().enumerate() {
            states[p * (n + 1) + k] = x;
        }
        sorted.copy_from_slice(&cur);
        sorted.sort_by(f64::total_cmp);
        let emp = features_of_sorted(model.features(), &sorted);
        let feat = match frozen {
            Some(f) => f.at(k).to_vec(),
            None => emp.clone(),
        };
        if k < n {
            let t = grid.time(k);
            cur.par_iter_mut().enumerate().for_each(|(p, x)| {
                let dw = inc[p * n + k];
                *x = *x + model.drift(t, *x, &feat) * dt + model.diffusion(t, *x, &feat) * dw;
            });
            if let Some(p) = cur.iter().position(|v| !v.is_finite()) {
                return Err(Error::SimulationDiverged { path: p, step: k + 1 });
            }
        }
        used.push(feat);
        empirical.push(emp);
    }
    let bundle = BrownianBundle::from_increments(np, n, 1, spec.seed, inc)?;
    let ens = PathEnsemble::from_states(grid.clone(), Arc::new(bundle), 1, states)?;
    let feats = model.features().to_vec();
    Ok((
        ens,
        FeatureFlow::new(feats.clone(), used)?,
        FeatureFlow::new(feats, empirical)?,
    ))
}

/// Backward LSMC across the particles with the measure argument frozen along
/// `flow`.
pub(crate) fn solve_cloud_backward(
    model: &MeanFieldModel,
    ens: &PathEnsemble,
    flow: &FeatureFlow,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<BsdeSolution> {
    let n = ens.n_steps();
    let mt = flow.at(n);
    let xi: Vec<f64> = (0..ens.n_paths())
        .map(|p| model.terminal(ens.state(p, n)[0], mt))
        .collect();
    let terminal = Terminal::from_values(xi);
    let driver = FlowDriver::new(model, flow, ens.grid());
    solve_bsde_lsmc(&BsdeProblem::new(ens, &terminal, &driver), basis, opts)
}

/// One simulated particle system with its backward values.
#[derive(Debug, Clone)]
pub struct ParticleRun {
    seed: u64,
    labels: Vec<u64>,
    ensemble: PathEnsemble,
    flow: FeatureFlow,
    empirical: FeatureFlow,
    solution: BsdeSolution,
}

impl ParticleRun {
    pub(crate) fn build(
        model: &MeanFieldModel,
        grid: &TimeGrid,
        spec: &CloudSpec<'_>,
        frozen: Option<&FeatureFlow>,
        basis: RegressionBasis,
        opts: &SolverOptions,
    ) -> Result<Self> {
        let (ensemble, flow, empirical) = simulate_cloud(model, grid, spec, frozen)?;
        let solution = solve_cloud_backward(model, &ensemble, &flow, basis, opts)?;
        Ok(ParticleRun {
            seed: spec.seed,
            labels: spec.labels.to_vec(),
            ensemble,
            flow,
            empirical,
            solution,
        })
    }

    pub fn n_particles(&self) -> usize {
        self.labels.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream index of each particle.
    pub fn labels(&self) -> &[u64] {
        &self.labels
    }

    pub fn grid(&self) -> &TimeGrid {
        self.ensemble.grid()
    }

    pub fn x(&self, particle: usize, step: usize) -> f64 {
        self.ensemble.state(particle, step)[0]
    }

    pub fn y(&self, particle: usize, step: usize) -> f64 {
        self.solution.y(particle, step)
    }

    pub fn z(&self, particle: usize, step: usize) -> f64 {
        self.solution.z(particle, step)[0]
    }

    /// States of every particle at `step`.
    pub fn x_step(&self, step: usize) -> Vec<f64> {
        (0..self.n_particles()).map(|p| self.x(p, step)).collect()
    }

    pub fn ensemble(&self) -> &PathEnsemble {
        &self.ensemble
    }

    pub fn solution(&self) -> &BsdeSolution {
        &self.solution
    }

    /// Features the coefficients were evaluated with.
    pub fn flow(&self) -> &FeatureFlow {
        &self.flow
    }

    /// Features of the simulated cloud itself, recorded during the forward pass.
    pub fn empirical_flow(&self) -> &FeatureFlow {
        &self.empirical
    }

    /// Rows `particle,step,t,x,y,z` (`z` is empty at the last node).
    pub fn to_csv(&self) -> String {
        let n = self.ensemble.n_steps();
        let mut s = String::from("particle,step,t,x,y,z\n");
        for p in 0..self.n_particles() {
            for k in 0..=n {
                let z = if k < n { self.z(p, k).to_string() } else { String::new() };
                let _ = writeln!(
                    s,
                    "{p},{k},{},{},{},{z}",
                    self.grid().time(k),
                    self.x(p, k),
                    self.y(p, k)
                );
            }
        }
        s
    }
}

/// Simulates `n` interacting particles, particle `i` drawing from stream `i`.
pub fn simulate_particles(
    model: &MeanFieldModel,
    n: usize,
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<ParticleRun> {
    let labels: Vec<u64> = (0..n as u64).collect();
    simulate_particles_labeled(model, &labels, grid, seed, basis, opts)
}

/// [`simulate_particles`] with explicit stream indices, one per particle.
pub fn simulate_particles_labeled(
    model: &MeanFieldModel,
    labels: &[u64],
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    opts: &SolverOptions,
) -> Result<ParticleRun> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a particle system needs at least 2 particles, got {}",
            labels.len()
        )));
    }
    let spec = CloudSpec {
        seed,
        labels,
        antithetic: false,
        x0_shift: None,
    };
    ParticleRun::build(model, grid, &spec, None, basis, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOptions {
    pub max_iters: usize,
    /// Stop once the sup-over-time feature change falls below this.
    pub tol: f64,
    /// Mirrored particle pairs in the cloud.
    pub antithetic: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            max_iters: 50,
            tol: 1e-10,
            antithetic: true,
        }
    }
}

/// Converged McKean-Vlasov limit.
#[derive(Debug, Clone)]
pub struct MeanFieldSolution {
    model: MeanFieldModel,
    /// Final cloud: a sample of representative particles and their values.
    pub cloud: ParticleRun,
    /// Fixed-point feature flow.
    pub flow: FeatureFlow,
    /// Sup-over-time feature change after each sweep.
    pub residuals: Vec<f64>,
    /// Flow updates needed (a model that ignores its features needs 1).
    pub iterations: usize,
}

impl MeanFieldSolution {
    pub fn model(&self) -> &MeanFieldModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        self.cloud.grid()
    }

    /// `Y_0` of the representative particle.
    pub fn y0(&self) -> f64 {
        self.cloud.solution().y0()
    }
}

/// Picard iteration on the feature flow. The first guess holds the initial
/// cloud's features constant in time; each sweep re-simulates the same
/// cloud (same noise) under the frozen flow and replaces the flow by the
/// cloud's empirical features.
pub fn solve_mckean_vlasov(
    model: &MeanFieldModel,
    n_cloud: usize,
    grid: &TimeGrid,
    seed: u64,
    basis: RegressionBasis,
    solver: &SolverOptions,
    opts: &FixedPointOptions,
) -> Result<MeanFieldSolution> {
    if n_cloud < 100 {
        return Err(Error::InvalidArgument(format!(
            "cloud size must be at least 100, got {n_cloud}"
        )));
    }
    if opts.max_iters < 2 {
        return Err(Error::InvalidArgument(
            "fixed-point iteration needs max_iters >= 2".into(),
        ));
    }
    let labels: Vec<u64> = (0..n_cloud as u64).collect();
    let spec = CloudSpec {
        seed: derive_seed(seed, "cloud"),
        labels: &labels,
        antithetic: opts.antithetic,
        x0_shift: None,
    };
    let x0 = spec.initial_states(model);
    let mut flow = FeatureFlow::constant(
        model.features().to_vec(),
        super::model::empirical_features(model.features(), &x0),
        grid.n_steps(),
    )?;
    let mut residuals = vec![];
    for sweep in 1..=opts.max_iters {
        let (ens, used, emp) = match simulate_cloud(model, grid, &spec, Some(&flow)) {
            Ok(v) => v,
            Err(e) if sweep > 1 && e.is_numerical() => {
                residuals.push(f64::INFINITY);
                return Err(Error::NoFixedPoint { residuals });
            }
            Err(e) => return Err(e),
        };
        let r = emp.sup_distance(&flow);
        residuals.push(r);
        if !r.is_finite() {
            return Err(Error::NoFixedPoint { residuals });
        }
        if sweep > 1 && r < opts.tol {
            let solution = solve_cloud_backward(model, &ens, &used, basis, solver)?;
            let cloud = ParticleRun {
                seed: spec.seed,
                labels: labels.clone(),
                ensemble: ens,
                flow: used,
                empirical: emp.clone(),
                solution,
            };
            return Ok(MeanFieldSolution {
                model: model.clone(),
                cloud,
                flow: emp,
                residuals,
                iterations: sweep - 1,
            });
        }
        flow = emp;
    }
    Err(Error::NoFixedPoint { residuals })
}
