use std::sync::Arc;

use rayon::prelude::*;

use super::{BrownianBundle, TimeGrid};
use crate::error::{Error, Result};

/// Optional arguments of a coupled forward model: the backward state `(y, z)`
/// and declared measure features. Decoupled models ignore them.
#[derive(Debug, Clone, Copy, Default)]
pub struct Coupling<'a> {
    pub y: f64,
    pub z: &'a [f64],
    pub features: &'a [f64],
}

/// Forward dynamics `dX = b(t, X, ...) dt + sigma(t, X, ...) dW`.
pub trait ForwardModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn initial_state(&self) -> &[f64];
    /// Writes `b(t, x, coupling)` into `out` (length `state_dim`).
    fn drift(&self, t: f64, x: &[f64], c: &Coupling<'_>, out: &mut [f64]);
    /// Writes `sigma(t, x, coupling)` row-major into `out`
    /// (`state_dim x noise_dim`).
    fn diffusion(&self, t: f64, x: &[f64], c: &Coupling<'_>, out: &mut [f64]);
}

/// Supplies `(y, z)` along forward paths for coupled simulation.
pub trait CouplingField: Sync {
    /// Returns `y` and writes `z` for the state `x` at `step` on `path`.
    fn eval(&self, path: usize, step: usize, x: &[f64], z: &mut [f64]) -> f64;
}

/// `X = x0 + W` in `dim` dimensions.
#[derive(Debug, Clone)]
pub struct BrownianMotion {
    x0: Vec<f64>,
}

impl BrownianMotion {
    pub fn new(dim: usize) -> Self {
        BrownianMotion { x0: vec![0.0; dim] }
    }

    pub fn from(x0: Vec<f64>) -> Self {
        BrownianMotion { x0 }
    }
}

impl ForwardModel for BrownianMotion {
    fn state_dim(&self) -> usize {
        self.x0.len()
    }
    fn noise_dim(&self) -> usize {
        self.x0.len()
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn drift(&self, _t: f64, _x: &[f64], _c: &Coupling<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _c: &Coupling<'_>, out: &mut [f64]) {
        let n = self.x0.len();
        out.fill(0.0);
        for i in 0..n {
            out[i * n + i] = 1.0;
        }
    }
}

/// Scalar geometric Brownian motion `dX = mu X dt + sigma X dW`.
#[derive(Debug, Clone)]
pub struct GeometricBrownian {
    pub mu: f64,
    pub sigma: f64,
    x0: [f64; 1],
}

impl GeometricBrownian {
    pub fn new(mu: f64, sigma: f64, x0: f64) -> Self {
        GeometricBrownian { mu, sigma, x0: [x0] }
    }
}

impl ForwardModel for GeometricBrownian {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn drift(&self, _t: f64, x: &[f64], _c: &Coupling<'_>, out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion(&self, _t: f64, x: &[f64], _c: &Coupling<'_>, out: &mut [f64]) {
        out[0] = self.sigma * x[0];
    }
}

/// Scalar `dX = (a + b X + e_y y + e_z z) dt + s dW`. With `e_y = e_z = 0`
/// it is decoupled.
#[derive(Debug, Clone)]
pub struct ScalarLinearSde {
    pub a: f64,
    pub b: f64,
    pub s: f64,
    pub e_y: f64,
    pub e_z: f64,
    x0: [f64; 1],
}

impl ScalarLinearSde {
    pub fn new(a: f64, b: f64, s: f64, x0: f64) -> Self {
        ScalarLinearSde {
            a,
            b,
            s,
            e_y: 0.0,
            e_z: 0.0,
            x0: [x0],
        }
    }

    pub fn with_coupling(mut self, e_y: f64, e_z: f64) -> Self {
        self.e_y = e_y;
        self.e_z = e_z;
        self
    }
}

impl ForwardModel for ScalarLinearSde {
    fn state_dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> &[f64] {
        &self.x0
    }
    fn drift(&self, _t: f64, x: &[f64], c: &Coupling<'_>, out: &mut [f64]) {
        let z = c.z.first().copied().unwrap_or(0.0);
        out[0] = self.a + self.b * x[0] + self.e_y * c.y + self.e_z * z;
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _c: &Coupling<'_>, out: &mut [f64]) {
        out[0] = self.s;
    }
}

/// Forward states `X[path][step]` together with the grid and noise that
/// produced them.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    bundle: Arc<BrownianBundle>,
    state_dim: usize,
    states: Vec<f64>,
}

impl PathEnsemble {
    /// Wraps precomputed states laid out `[path][step][state_dim]`.
    pub fn from_states(
        grid: TimeGrid,
        bundle: Arc<BrownianBundle>,
        state_dim: usize,
        states: Vec<f64>,
    ) -> Result<Self> {
        if bundle.n_steps() != grid.n_steps() {
            return Err(Error::InvalidArgument("bundle and grid step counts differ".into()));
        }
        if states.len() != bundle.n_paths() * (grid.n_steps() + 1) * state_dim {
            return Err(Error::InvalidArgument("state array has the wrong length".into()));
        }
        Ok(PathEnsemble {
            grid,
            bundle,
            state_dim,
            states,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn bundle(&self) -> &BrownianBundle {
        &self.bundle
    }

    pub fn shared_bundle(&self) -> Arc<BrownianBundle> {
        Arc::clone(&self.bundle)
    }

    pub fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.bundle.dim()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    #[inline]
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * (self.grid.n_steps() + 1) + step) * self.state_dim;
        &self.states[o..o + self.state_dim]
    }

    /// States of one path, `[step][state_dim]`.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = (self.grid.n_steps() + 1) * self.state_dim;
        &self.states[path * len..(path + 1) * len]
    }

    /// The ensemble restricted to the first `steps` steps, i.e. to
    /// `[0, t_steps]`.
    pub fn head(&self, steps: usize) -> Result<PathEnsemble> {
        if steps == 0 || steps > self.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "head length must be in 1..={}, got {steps}",
                self.n_steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.time(steps), steps)?;
        let (np, ns, d) = (self.n_paths(), self.n_steps(), self.noise_dim());
        let mut inc = Vec::with_capacity(np * steps * d);
        let mut states = Vec::with_capacity(np * (steps + 1) * self.state_dim);
        for p in 0..np {
            inc.extend_from_slice(&self.bundle.path(p)[..steps * d]);
            let o = p * (ns + 1) * self.state_dim;
            states.extend_from_slice(&self.states[o..o + (steps + 1) * self.state_dim]);
        }
        let bundle = BrownianBundle::from_increments(np, steps, d, self.bundle.seed(), inc)?;
        PathEnsemble::from_states(grid, Arc::new(bundle), self.state_dim, states)
    }

    /// First coordinate of `X_T` on every path.
    pub fn terminal_first(&self) -> Vec<f64> {
        let n = self.n_steps();
        (0..self.n_paths()).map(|p| self.state(p, n)[0]).collect()
    }
}

/// Euler-Maruyama simulation of a decoupled model.
pub fn simulate_forward(
    model: &dyn ForwardModel,
    grid: &TimeGrid,
    bundle: Arc<BrownianBundle>,
) -> Result<PathEnsemble> {
    simulate_forward_coupled(model, grid, bundle, None)
}

/// Euler-Maruyama simulation with an optional coupling field feeding
/// `(y, z)` into the coefficients.
pub fn simulate_forward_coupled(
    model: &dyn ForwardModel,
    grid: &TimeGrid,
    bundle: Arc<BrownianBundle>,
    field: Option<&dyn CouplingField>,
) -> Result<PathEnsemble> {
    let n = model.state_dim();
    let d = model.noise_dim();
    if bundle.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "model noise dimension {d} differs from bundle dimension {}",
            bundle.dim()
        )));
    }
    if bundle.n_steps() != grid.n_steps() {
        return Err(Error::InvalidArgument("bundle and grid step counts differ".into()));
    }
    if model.initial_state().len() != n {
        return Err(Error::InvalidArgument("initial state has the wrong dimension".into()));
    }
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let per_path = (n_steps + 1) * n;
    let mut states = vec![0.0; bundle.n_paths() * per_path];

    let failures: Vec<Option<usize>> = states
        .par_chunks_mut(per_path)
        .enumerate()
        .map(|(p, path)| {
            path[..n].copy_from_slice(model.initial_state());
            let mut b = vec![0.0; n];
            let mut s = vec![0.0; n * d];
            let mut z = vec![0.0; d];
            for k in 0..n_steps {
                let (done, rest) = path.split_at_mut((k + 1) * n);
                let x = &done[k * n..];
                let y = match field {
                    Some(f) => f.eval(p, k, x, &mut z),
                    None => 0.0,
                };
                let c = Coupling {
                    y,
                    z: &z,
                    features: &[],
                };
                let t = grid.time(k);
                model.drift(t, x, &c, &mut b);
                model.diffusion(t, x, &c, &mut s);
                let dw = bundle.dw(p, k);
                let next = &mut rest[..n];
                for i in 0..n {
                    let mut v = x[i] + b[i] * dt;
                    for j in 0..d {
                        v += s[i * d + j] * dw[j];
                    }
                    next[i] = v;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Some(k + 1);
                }
            }
            None
        })
        .collect();
    if let Some((path, step)) = failures.iter().enumerate().find_map(|(p, f)| f.map(|k| (p, k))) {
        return Err(Error::SimulationDiverged { path, step });
    }
    PathEnsemble::from_states(grid.clone(), bundle, n, states)
}
