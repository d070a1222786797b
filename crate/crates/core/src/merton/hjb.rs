use std::fmt::Write as _;

use super::market::MarketParams;
use crate::error::{Error, Result};

/// Discretization of the log-wealth HJB.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbGridSpec {
    /// Number of log-wealth intervals (`J + 1` nodes).
    pub intervals: usize,
    /// Time steps; `None` picks the smallest stable count.
    pub n_time_steps: Option<usize>,
    /// Log-wealth range; `None` centers a wide range on `log x0`.
    pub l_range: Option<(f64, f64)>,
    pub x0: f64,
}

impl Default for HjbGridSpec {
    fn default() -> Self {
        HjbGridSpec {
            intervals: 200,
            n_time_steps: None,
            l_range: None,
            x0: 1.0,
        }
    }
}

impl HjbGridSpec {
    /// Log-wealth interval. The default spans four wealth standard
    /// deviations at the classical allocation, plus the largest drift.
    pub fn range(&self, p: &MarketParams) -> (f64, f64) {
        if let Some(r) = self.l_range {
            return r;
        }
        let pi = p.classical_fraction().max(1.0);
        let sd = p.sigma * pi * p.horizon.sqrt();
        let drift = (p.r + pi * (p.mu - p.r)).abs() * p.horizon;
        let c = self.x0.ln();
        (c - 4.0 * sd - drift, c + 4.0 * sd + drift)
    }

    fn validate(&self, p: &MarketParams) -> Result<()> {
        if self.intervals < 4 {
            return Err(Error::InvalidArgument("HJB grid needs at least 4 intervals".into()));
        }
        if !(self.x0 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "initial wealth must be positive, got {}",
                self.x0
            )));
        }
        let (lo, hi) = self.range(p);
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!("invalid log-wealth range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Headroom on the allocation bound used in the stability check.
const PI_MARGIN: f64 = 1.1;

/// Smallest number of explicit time steps for which every node update is a
/// convex combination, given fractions up to `pi_max`.
pub fn required_time_steps(p: &MarketParams, h: f64, pi_max: f64) -> usize {
    let b2 = p.sigma * p.sigma * pi_max * pi_max;
    let a = p.r.abs() + pi_max * (p.mu - p.r) + 0.5 * b2;
    (p.horizon * (b2 / (h * h) + a / h)).ceil() as usize
}

/// Value, derivatives and policy on the `(t, log x)` grid. Arrays are
/// `[time step][node]`.
#[derive(Debug, Clone)]
pub struct HjbGrid {
    pub params: MarketParams,
    pub theta: f64,
    l: Vec<f64>,
    times: Vec<f64>,
    value: Vec<Vec<f64>>,
    dv: Vec<Vec<f64>>,
    dvv: Vec<Vec<f64>>,
    policy: Vec<Vec<f64>>,
}

impl HjbGrid {
    pub fn log_wealth(&self) -> &[f64] {
        &self.l
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_time_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.l.len()
    }

    pub fn wealth(&self, node: usize) -> f64 {
        self.l[node].exp()
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        self.value[step][node]
    }

    /// `dV/dx`.
    pub fn dv(&self, step: usize, node: usize) -> f64 {
        self.dv[step][node]
    }

    /// `d^2V/dx^2`.
    pub fn dvv(&self, step: usize, node: usize) -> f64 {
        self.dvv[step][node]
    }

    /// Fraction of wealth `pi = Pi / x` in the risky asset.
    pub fn policy(&self, step: usize, node: usize) -> f64 {
        self.policy[step][node]
    }

    pub fn policy_step(&self, step: usize) -> &[f64] {
        &self.policy[step]
    }

    /// Nodes away from both boundaries.
    pub fn interior(&self) -> std::ops::Range<usize> {
        1..self.l.len() - 1
    }

    /// Rows `t,x,V,pi`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,V,pi\n");
        for (k, t) in self.times.iter().enumerate() {
            for j in 0..self.l.len() {
                let _ = writeln!(s, "{t},{},{},{}", self.wealth(j), self.value[k][j], self.policy[k][j]);
            }
        }
        s
    }
}

#[derive(Clone, Copy)]
enum Rule {
    Optimal,
    Fixed(f64),
}

/// Explicit backward solve of the HJB with the ambiguity driver
/// `-(theta/2) z^2`, in `l = log x`.
///
/// With `W(t, l) = V(t, e^l)` and fraction `pi` the equation reads
///
/// ```text
/// W_t + (r + pi (mu - r) - sigma^2 pi^2 / 2) W_l + sigma^2 pi^2 W_ll / 2
///     - theta sigma^2 pi^2 W_l^2 / 2 = 0
/// ```
///
/// and the supremum over `pi` is attained at `pi = -(mu - r) W_l / (sigma^2 (W_ll - W_l - theta W_l^2))`.
/// Each step evaluates that maximizer from central differences, then applies
/// the drift with an upwinded difference. Both ends extrapolate `log |W|`
/// linearly, which is exact for power-law values.
pub fn solve_hjb(params: &MarketParams, theta: f64, spec: &HjbGridSpec) -> Result<HjbGrid> {
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ambiguity parameter must be >= 0, got {theta}"
        )));
    }
    solve(params, theta, spec, Rule::Optimal)
}

/// The same scheme with the fraction held at `pi` (no optimization).
pub fn solve_fixed_policy(params: &MarketParams, theta: f64, pi: f64, spec: &HjbGridSpec) -> Result<HjbGrid> {
    if !(theta >= 0.0 && theta.is_finite() && pi.is_finite()) {
        return Err(Error::InvalidArgument("theta must be >= 0 and pi finite".into()));
    }
    solve(params, theta, spec, Rule::Fixed(pi))
}

fn solve(p: &MarketParams, theta: f64, spec: &HjbGridSpec, rule: Rule) -> Result<HjbGrid> {
    p.validate()?;
    spec.validate(p)?;
    let (lo, hi) = spec.range(p);
    let nj = spec.intervals;
    let h = (hi - lo) / nj as f64;
    let l: Vec<f64> = (0..=nj).map(|j| lo + h * j as f64).collect();
    let pi_max = match rule {
        Rule::Optimal => PI_MARGIN * p.classical_fraction(),
        Rule::Fixed(pi) => pi.abs(),
    };
    let required = required_time_steps(p, h, pi_max);
    let n = spec.n_time_steps.unwrap_or(required);
    if n < required {
        return Err(Error::UnstableGrid {
            required_steps: required,
        });
    }
    let dt = p.horizon / n as f64;
    let times: Vec<f64> = (0..=n)
        .map(|k| {
            if k == n {
                p.horizon
            } else {
                p.horizon * k as f64 / n as f64
            }
        })
        .collect();
    let ex = p.mu - p.r;
    let s2 = p.sigma * p.sigma;

    let mut value = vec![Vec::new(); n + 1];
    let mut dv = vec![Vec::new(); n + 1];
    let mut dvv = vec![Vec::new(); n + 1];
    let mut policy = vec![Vec::new(); n + 1];
    value[n] = l.iter().map(|&x| p.utility(x.exp())).collect();

    // Derivatives and the fraction at every interior node of `w`.
    let analyze = |w: &[f64], step: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut wl = vec![0.0; nj + 1];
        let mut wll = vec![0.0; nj + 1];
        let mut pis = vec![0.0; nj + 1];
        let mut vx = vec![0.0; nj + 1];
        let mut vxx = vec![0.0; nj + 1];
        for j in 1..nj {
            let a = (w[j + 1] - w[j - 1]) / (2.0 * h);
            let b = (w[j + 1] - 2.0 * w[j] + w[j - 1]) / (h * h);
            let x = l[j].exp();
            wl[j] = a;
            wll[j] = b;
            vx[j] = a / x;
            vxx[j] = (b - a) / (x * x);
            pis[j] = match rule {
                Rule::Fixed(pi) => pi,
                Rule::Optimal => {
                    let fail = |reason: String| Error::SolverInconsistent { step, node: j, reason };
                    if !(vx[j] > 0.0) {
                        return Err(fail(format!("dV/dx = {} is not positive", vx[j])));
                    }
                    if !(vxx[j] < 0.0) {
                        return Err(fail(format!("d2V/dx2 = {} is not negative", vxx[j])));
                    }
                    let d = b - a - theta * a * a;
                    if !(d < 0.0) {
                        return Err(fail(format!("second-order denominator {d} is not negative")));
                    }
                    -ex * a / (s2 * d)
                }
            };
        }
        for v in [&mut wl, &mut wll, &mut pis, &mut vx, &mut vxx] {
            v[0] = v[1];
            v[nj] = v[nj - 1];
        }
        Ok((wl, wll, pis, vx, vxx))
    };

    for k in (0..n).rev() {
        let w = &value[k + 1];
        let (wl, wll, pis, vx, vxx) = analyze(w, k + 1)?;
        let mut next = vec![0.0; nj + 1];
        for j in 1..nj {
            let pi = pis[j];
            let b2 = s2 * pi * pi;
            let drift = p.r + pi * ex - 0.5 * b2;
            let up = if drift >= 0.0 {
                (w[j + 1] - w[j]) / h
            } else {
                (w[j] - w[j - 1]) / h
            };
            next[j] = w[j] + dt * (drift * up + 0.5 * b2 * wll[j] - 0.5 * theta * b2 * wl[j] * wl[j]);
        }
        next[0] = next[1] * next[1] / next[2];
        next[nj] = next[nj - 1] * next[nj - 1] / next[nj - 2];
        if let Some(j) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::SolverInconsistent {
                step: k,
                node: j,
                reason: "value is not finite".into(),
            });
        }
        value[k] = next;
        dv[k + 1] = vx;
        dvv[k + 1] = vxx;
        policy[k + 1] = pis;
    }
    let (_, _, pis, vx, vxx) = analyze(&value[0], 0)?;
    dv[0] = vx;
    dvv[0] = vxx;
    policy[0] = pis;
    Ok(HjbGrid {
        params: *p,
        theta,
        l,
        times,
        value,
        dv,
        dvv,
        policy,
    })
}

/// Bilinear interpolation of the policy in `(t, log x)`.
#[derive(Debug, Clone)]
pub struct PolicySurface {
    l: Vec<f64>,
    times: Vec<f64>,
    policy: Vec<Vec<f64>>,
}

/// Interpolated value together with whether the query was clamped to the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyQuery {
    pub fraction: f64,
    pub clamped: bool,
}

pub fn extract_policy(hjb: &HjbGrid) -> PolicySurface {
    PolicySurface {
        l: hjb.l.clone(),
        times: hjb.times.clone(),
        policy: hjb.policy.clone(),
    }
}

fn locate(nodes: &[f64], v: f64) -> (usize, f64, bool) {
    let n = nodes.len();
    let (lo, hi) = (nodes[0], nodes[n - 1]);
    let clamped = v < lo || v > hi || v.is_nan();
    let v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
    let step = (hi - lo) / (n - 1) as f64;
    let i = (((v - lo) / step).floor() as usize).min(n - 2);
    let w = ((v - nodes[i]) / (nodes[i + 1] - nodes[i])).clamp(0.0, 1.0);
    (i, w, clamped)
}

impl PolicySurface {
    /// Fraction `pi*(t, x)`; off-grid queries are clamped with a warning.
    pub fn query(&self, t: f64, x: f64) -> PolicyQuery {
        let lx = if x > 0.0 { x.ln() } else { f64::NEG_INFINITY };
        let (i, wt, ct) = locate(&self.times, t);
        let (j, wl, cl) = locate(&self.l, lx);
        let p = &self.policy;
        let a = (1.0 - wl) * p[i][j] + wl * p[i][j + 1];
        let b = (1.0 - wl) * p[i + 1][j] + wl * p[i + 1][j + 1];
        let clamped = ct || cl;
        if clamped {
            log::warn!("policy query (t = {t}, x = {x}) outside the grid; clamped");
        }
        PolicyQuery {
            fraction: (1.0 - wt) * a + wt * b,
            clamped,
        }
    }

    pub fn fraction(&self, t: f64, x: f64) -> f64 {
        self.query(t, x).fraction
    }

    /// Amount `Pi*(t, x) = x pi*(t, x)`.
    pub fn amount(&self, t: f64, x: f64) -> f64 {
        x * self.fraction(t, x)
    }
}
