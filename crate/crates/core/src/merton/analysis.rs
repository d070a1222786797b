use std::fmt::Write as _;
use std::io::Read;
use std::sync::Arc;

use super::hjb::{extract_policy, solve_fixed_policy, solve_hjb, HjbGrid, HjbGridSpec};
use super::market::MarketParams;
use crate::bsde::{
    closed_form_oracle, solve_bsde_lsmc, BsdeProblem, OracleKind, RegressionBasis, SolverOptions, Terminal,
};
use crate::error::{Error, Result};
use crate::nets::BuiltinDriver;
use crate::stochastic::{simulate_forward, BrownianBundle, GeometricBrownian, TimeGrid};

/// Observed sign of `d pi* / dx` at `t = 0` over the central half of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WealthTrend {
    Decreasing,
    Increasing,
    Flat,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthDiagnostic {
    pub theta: f64,
    pub trend: WealthTrend,
    /// Whether the trend is the one expected for this `gamma`
    /// (decreasing for `0 < gamma < 1`, increasing for `gamma < 0`, flat at
    /// `theta = 0`). Reported, never enforced.
    pub matches_heuristic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguityReport {
    pub thetas: Vec<f64>,
    pub classical_fraction: f64,
    /// Largest interior fraction at each `theta`.
    pub max_fraction: Vec<f64>,
    /// Every `theta > 0` stays strictly below the classical fraction at
    /// every interior node.
    pub caution_holds: bool,
    /// Interior fractions strictly decrease between consecutive `theta`.
    pub monotone_holds: bool,
    /// First failing `(theta index, step, node)` of either check.
    pub first_violation: Option<(usize, usize, usize)>,
    pub wealth: Vec<WealthDiagnostic>,
}

impl AmbiguityReport {
    pub fn passed(&self) -> bool {
        self.caution_holds && self.monotone_holds
    }
}

/// Relative size below which a slope counts as flat.
const FLAT_TOL: f64 = 1e-6;

fn wealth_trend(g: &HjbGrid) -> WealthTrend {
    let n = g.n_nodes();
    let row = g.policy_step(0);
    let (a, b) = (n / 4, 3 * n / 4);
    let scale = row[a..b].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let (mut up, mut down) = (0, 0);
    for j in a..b - 1 {
        let d = row[j + 1] - row[j];
        if d > FLAT_TOL * scale {
            up += 1;
        } else if d < -FLAT_TOL * scale {
            down += 1;
        }
    }
    match (up, down) {
        (0, 0) => WealthTrend::Flat,
        (_, 0) => WealthTrend::Increasing,
        (0, _) => WealthTrend::Decreasing,
        _ => WealthTrend::Mixed,
    }
}

/// Solves the HJB for each `theta` and checks that ambiguity lowers the
/// allocation below the classical one, and more so for larger `theta`.
pub fn verify_ambiguity_properties(
    params: &MarketParams,
    thetas: &[f64],
    spec: &HjbGridSpec,
) -> Result<AmbiguityReport> {
    if thetas.is_empty() || thetas[0] < 0.0 || thetas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "theta list must be non-empty, non-negative and increasing, got {thetas:?}"
        )));
    }
    let pc = params.classical_fraction();
    let grids: Vec<HjbGrid> = thetas
        .iter()
        .map(|&th| solve_hjb(params, th, spec))
        .collect::<Result<_>>()?;
    let mut caution = true;
    let mut monotone = true;
    let mut first = None;
    let mut max_fraction = vec![];
    let mut wealth = vec![];
    for (i, g) in grids.iter().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..=g.n_time_steps() {
            for j in g.interior() {
                let pi = g.policy(k, j);
                mx = mx.max(pi);
                if g.theta > 0.0 && !(pi < pc) {
                    caution = false;
                    first.get_or_insert((i, k, j));
                }
                if i > 0 && !(pi < grids[i - 1].policy(k, j)) {
                    monotone = false;
                    first.get_or_insert((i, k, j));
                }
            }
        }
        max_fraction.push(mx);
        let trend = wealth_trend(g);
        let expected = if g.theta == 0.0 {
            WealthTrend::Flat
        } else if params.gamma > 0.0 {
            WealthTrend::Decreasing
        } else {
            WealthTrend::Increasing
        };
        wealth.push(WealthDiagnostic {
            theta: g.theta,
            trend,
            matches_heuristic: trend == expected,
        });
    }
    Ok(AmbiguityReport {
        thetas: thetas.to_vec(),
        classical_fraction: pc,
        max_fraction,
        caution_holds: caution,
        monotone_holds: monotone,
        first_violation: first,
        wealth,
    })
}

/// An observed allocation amount `Pi` at `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationObservation {
    pub t: f64,
    pub x: f64,
    pub amount: f64,
}

impl AllocationObservation {
    pub fn new(t: f64, x: f64, amount: f64) -> Result<Self> {
        if !(x > 0.0) || !t.is_finite() || !amount.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "observation needs finite t and amount and x > 0, got ({t}, {x}, {amount})"
            )));
        }
        Ok(AllocationObservation { t, x, amount })
    }
}

/// Reads `t,x,allocation` rows (header required).
pub fn read_observations(reader: impl Read) -> Result<Vec<AllocationObservation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = vec![];
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("observation row {}: {e}", i + 2)))?;
        if row.len() != 3 {
            return Err(Error::Parse(format!("observation row {}: expected 3 columns", i + 2)));
        }
        let v: Vec<f64> = row
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("observation row {}: `{s}` is not a number", i + 2)))
            })
            .collect::<Result<_>>()?;
        out.push(AllocationObservation::new(v[0], v[1], v[2])?);
    }
    Ok(out)
}

pub fn observations_to_csv(obs: &[AllocationObservation]) -> String {
    let mut s = String::from("t,x,allocation\n");
    for o in obs {
        let _ = writeln!(s, "{},{},{}", o.t, o.x, o.amount);
    }
    s
}

/// Amounts `Pi*(t_i, x_i; theta)` from a fresh solve.
pub fn model_allocations(
    params: &MarketParams,
    theta: f64,
    points: &[(f64, f64)],
    spec: &HjbGridSpec,
) -> Result<Vec<f64>> {
    let surf = extract_policy(&solve_hjb(params, theta, spec)?);
    Ok(points.iter().map(|&(t, x)| surf.amount(t, x)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSearch {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub tol: f64,
}

impl Default for CalibrationSearch {
    fn default() -> Self {
        CalibrationSearch {
            theta_lo: 0.0,
            theta_hi: 2.0,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub theta: f64,
    pub loss: f64,
    /// Every `(theta, loss)` evaluated, sorted by `theta`.
    pub curve: Vec<(f64, f64)>,
    /// The golden-section bracket was inconsistent and a grid scan was used.
    pub fell_back: bool,
}

impl CalibrationResult {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("theta,loss\n");
        for (t, l) in &self.curve {
            let _ = writeln!(s, "{t},{l}");
        }
        s
    }
}

const SCAN_POINTS: usize = 64;

/// Least-squares fit of `theta` to observed allocation amounts, by
/// golden-section search with one HJB solve per evaluation.
pub fn calibrate_theta(
    params: &MarketParams,
    observations: &[AllocationObservation],
    spec: &HjbGridSpec,
    search: &CalibrationSearch,
) -> Result<CalibrationResult> {
    if observations.is_empty() {
        return Err(Error::InvalidArgument("no observations to calibrate on".into()));
    }
    let CalibrationSearch {
        theta_lo,
        theta_hi,
        tol,
    } = *search;
    if !(theta_lo >= 0.0 && theta_lo < theta_hi && tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "search needs 0 <= theta_lo < theta_hi and tol > 0, got {search:?}"
        )));
    }
    let points: Vec<(f64, f64)> = observations.iter().map(|o| (o.t, o.x)).collect();
    let mut curve: Vec<(f64, f64)> = vec![];
    let mut loss = |th: f64| -> Result<f64> {
        let fitted = model_allocations(params, th, &points, spec)?;
        let l = fitted
            .iter()
            .zip(observations)
            .map(|(f, o)| (f - o.amount).powi(2))
            .sum::<f64>()
            / observations.len() as f64;
        curve.push((th, l));
        Ok(l)
    };

    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (theta_lo, theta_hi);
    let (fa, fb) = (loss(a)?, loss(b)?);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (loss(c)?, loss(d)?);
    let (mut fa, mut fb) = (fa, fb);
    let mut consistent = true;
    while b - a > tol {
        // A unimodal function never has an interior point above both neighbours.
        if fc > fa.max(fd) || fd > fc.max(fb) {
            consistent = false;
            break;
        }
        if fc <= fd {
            b = d;
            fb = fd;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = loss(c)?;
        } else {
            a = c;
            fa = fc;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = loss(d)?;
        }
    }
    if !consistent {
        log::warn!("calibration loss is not unimodal on [{theta_lo}, {theta_hi}]; scanning a grid");
        for i in 0..SCAN_POINTS {
            loss(theta_lo + (theta_hi - theta_lo) * i as f64 / (SCAN_POINTS - 1) as f64)?;
        }
    }
    curve.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (theta, best) = if consistent {
        let cands = [(a, fa), (c, fc), (d, fd), (b, fb)];
        cands.into_iter().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap()
    } else {
        curve.iter().copied().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap()
    };
    Ok(CalibrationResult {
        theta,
        loss: best,
        curve,
        fell_back: !consistent,
    })
}

/// Value at `(0, x0)` of a fixed strategy under the ambiguity driver, by the
/// PDE and by the BSDE route.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCheck {
    pub pde: f64,
    pub bsde: f64,
    pub bsde_std_error: f64,
    /// Entropic closed form on the same simulated terminal wealth.
    pub oracle: f64,
}

/// Runs the constant-fraction strategy `pi` through [`solve_fixed_policy`]
/// and through the LSMC solver with the entropic driver on simulated wealth.
#[allow(clippy::too_many_arguments)]
pub fn bsde_cross_check(
    params: &MarketParams,
    theta: f64,
    pi: f64,
    spec: &HjbGridSpec,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
) -> Result<CrossCheck> {
    if !(theta > 0.0) {
        return Err(Error::InvalidArgument("the cross-check needs theta > 0".into()));
    }
    let pde_grid = solve_fixed_policy(params, theta, pi, spec)?;
    let l0 = spec.x0.ln();
    let nodes = pde_grid.log_wealth();
    let h = nodes[1] - nodes[0];
    let j = (((l0 - nodes[0]) / h).floor() as usize).min(nodes.len() - 2);
    let w = (l0 - nodes[j]) / h;
    let pde = (1.0 - w) * pde_grid.value(0, j) + w * pde_grid.value(0, j + 1);

    let grid = TimeGrid::new(params.horizon, n_steps)?;
    let bundle = Arc::new(BrownianBundle::sample(&grid, n_paths, 1, seed)?);
    let model = GeometricBrownian::new(params.r + pi * (params.mu - params.r), params.sigma * pi, spec.x0);
    let ens = simulate_forward(&model, &grid, bundle)?;
    let p = *params;
    let terminal = Terminal::of_state(move |x| p.utility(x[0].max(f64::MIN_POSITIVE)));
    let driver = BuiltinDriver::entropic(theta);
    let sol = solve_bsde_lsmc(
        &BsdeProblem::new(&ens, &terminal, &driver),
        RegressionBasis::new(3),
        &SolverOptions::default(),
    )?;
    let xi = terminal.values(&ens);
    let oracle = closed_form_oracle(&OracleKind::Entropic { theta }, &xi, None, params.horizon)?;
    Ok(CrossCheck {
        pde,
        bsde: sol.y0(),
        bsde_std_error: sol.mc_std_error(),
        oracle,
    })
}
