//! Fully coupled forward-backward systems by Picard iteration on the
//! regressed `(Y, Z)` fields.

use std::sync::Arc;

use super::regression::RegressionBasis;
use super::solver::{solve_bsde_lsmc, BsdeProblem, BsdeSolution, FieldSurfaces, SolverOptions};
use super::terminal::Terminal;
use crate::error::{Error, Result};
use crate::nets::Driver;
use crate::stochastic::{
    simulate_forward_coupled, BrownianBundle, CouplingField, ForwardModel, PathEnsemble, TimeGrid,
};

#[derive(Debug, Clone, PartialEq)]
pub struct PicardOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            max_iters: 30,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FbsdeResult {
    pub ensemble: PathEnsemble,
    pub solution: BsdeSolution,
    /// Residual after each re-solve, starting from the second sweep.
    pub residuals: Vec<f64>,
    /// Picard iterations needed to reach `tol` (a decoupled system needs 1).
    pub iterations: usize,
    pub converged: bool,
}

struct ZeroField;

impl CouplingField for ZeroField {
    fn eval(&self, _path: usize, _step: usize, _x: &[f64], z: &mut [f64]) -> f64 {
        z.fill(0.0);
        0.0
    }
}

/// Number of consecutive non-decreasing residuals that aborts the iteration.
const STALL_LIMIT: usize = 3;

/// Picard iteration: simulate the forward SDE with the previous sweep's
/// `(Y, Z)` surfaces (zero in the first sweep), re-solve the BSDE on the new
/// paths, and refit the surfaces. The residual of sweep `k >= 2` is the
/// larger of `|Y0_k - Y0_{k-1}|` and the sup over current paths and steps
/// of the change in the `Y` surface.
#[allow(clippy::too_many_arguments)]
pub fn solve_fbsde_picard(
    model: &dyn ForwardModel,
    grid: &TimeGrid,
    bundle: Arc<BrownianBundle>,
    terminal: &Terminal,
    driver: &dyn Driver,
    basis: RegressionBasis,
    solver: &SolverOptions,
    opts: &PicardOptions,
) -> Result<FbsdeResult> {
    if opts.max_iters < 2 {
        return Err(Error::InvalidArgument("Picard iteration needs max_iters >= 2".into()));
    }
    let mut residuals: Vec<f64> = vec![];
    let mut prev: Option<(FieldSurfaces, f64)> = None;
    let mut stall = 0;
    for sweep in 1..=opts.max_iters {
        let field: &dyn CouplingField = match &prev {
            Some((s, _)) => s,
            None => &ZeroField,
        };
        let step = simulate_forward_coupled(model, grid, Arc::clone(&bundle), Some(field)).and_then(|ens| {
            let sol = solve_bsde_lsmc(&BsdeProblem::new(&ens, terminal, driver), basis, solver)?;
            Ok((ens, sol))
        });
        let (ens, sol) = match step {
            Ok(v) => v,
            // Blow-up under a frozen field from an earlier sweep is the iteration failing.
            Err(e) if prev.is_some() && e.is_numerical() => {
                residuals.push(f64::INFINITY);
                return Err(Error::NoContraction { residuals });
            }
            Err(e) => return Err(e),
        };
        let surf = sol.surfaces(&ens);
        if let Some((old, old_y0)) = &prev {
            let mut r = (sol.y0() - old_y0).abs();
            for p in 0..ens.n_paths() {
                for k in 0..grid.n_steps() {
                    let x = ens.state(p, k);
                    r = r.max((surf.y_at(k, x) - old.y_at(k, x)).abs());
                }
            }
            if let Some(&last) = residuals.last() {
                if r >= last {
                    stall += 1;
                } else {
                    stall = 0;
                }
            }
            residuals.push(r);
            if !r.is_finite() || stall >= STALL_LIMIT {
                return Err(Error::NoContraction { residuals });
            }
            if r < opts.tol {
                return Ok(FbsdeResult {
                    ensemble: ens,
                    solution: sol,
                    residuals,
                    iterations: sweep - 1,
                    converged: true,
                });
            }
        }
        if sweep == opts.max_iters {
            return Ok(FbsdeResult {
                ensemble: ens,
                solution: sol,
                residuals,
                iterations: sweep,
                converged: false,
            });
        }
        let y0 = sol.y0();
        prev = Some((surf, y0));
    }
    unreachable!("loop returns on its last sweep")
}
