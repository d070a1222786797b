//! Sampling-based checks of the structural assumptions on a driver.

use super::Driver;
use crate::rng::{derive_seed, Stream};

/// Region from which driver arguments are sampled. Each coordinate is
/// uniform on its interval; `y` is uniform on `[-y_radius, y_radius]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub t: (f64, f64),
    pub x: (f64, f64),
    pub y_radius: f64,
    pub z: (f64, f64),
}

impl Default for SampleBox {
    fn default() -> Self {
        SampleBox {
            t: (0.0, 1.0),
            x: (-2.0, 2.0),
            y_radius: 5.0,
            z: (-3.0, 3.0),
        }
    }
}

struct Sampler {
    tx: Stream,
    y: Stream,
    z: Stream,
    x_dim: usize,
    z_dim: usize,
    bx: SampleBox,
}

impl Sampler {
    fn new(driver: &dyn Driver, seed: u64, bx: &SampleBox) -> Self {
        Sampler {
            tx: Stream::new(derive_seed(seed, "sample-tx"), 0),
            y: Stream::new(derive_seed(seed, "sample-y"), 0),
            z: Stream::new(derive_seed(seed, "sample-z"), 0),
            x_dim: driver.x_dim().unwrap_or(1),
            z_dim: driver.z_dim().unwrap_or(1),
            bx: bx.clone(),
        }
    }

    fn tx(&mut self) -> (f64, Vec<f64>) {
        let (a, b) = self.bx.t;
        let t = a + (b - a) * self.tx.uniform();
        let (lo, hi) = self.bx.x;
        let x = (0..self.x_dim).map(|_| lo + (hi - lo) * self.tx.uniform()).collect();
        (t, x)
    }

    fn y(&mut self) -> f64 {
        self.bx.y_radius * (2.0 * self.y.uniform() - 1.0)
    }

    fn z(&mut self) -> Vec<f64> {
        let (lo, hi) = self.bx.z;
        (0..self.z_dim).map(|_| lo + (hi - lo) * self.z.uniform()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub max_dy: f64,
    pub n_samples: usize,
    pub pass: bool,
}

/// Samples `df/dy` and passes iff every sample is `<= 0` (no tolerance).
pub fn verify_monotone(driver: &dyn Driver, n_samples: usize, seed: u64) -> MonotoneReport {
    verify_monotone_in(driver, n_samples, seed, &SampleBox::default())
}

pub fn verify_monotone_in(driver: &dyn Driver, n_samples: usize, seed: u64, bx: &SampleBox) -> MonotoneReport {
    let mut s = Sampler::new(driver, seed, bx);
    let mut max_dy = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let (t, x) = s.tx();
        let y = s.y();
        let z = s.z();
        max_dy = max_dy.max(driver.gradients(t, &x, y, &z).dy);
    }
    MonotoneReport {
        max_dy,
        n_samples,
        pass: !(max_dy > 0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    /// Largest `f(midpoint) - (f(u1) + f(u2)) / 2` over the segments.
    pub max_gap: f64,
    pub n_segments: usize,
    pub n_violations: usize,
    pub pass: bool,
}

/// Allowance for rounding in the three evaluations of a midpoint test.
fn rounding_allowance(f1: f64, f2: f64, fm: f64) -> f64 {
    64.0 * f64::EPSILON * (1.0 + f1.abs() + f2.abs() + fm.abs())
}

/// Midpoint convexity in `(y, z)` for fixed sampled `(t, x)`. A segment
/// fails when the gap exceeds `tol` plus a rounding allowance of a few
/// dozen ulps of the values involved.
pub fn verify_convexity(driver: &dyn Driver, n_segments: usize, seed: u64, tol: f64) -> ConvexityReport {
    verify_convexity_in(driver, n_segments, seed, tol, &SampleBox::default())
}

pub fn verify_convexity_in(
    driver: &dyn Driver,
    n_segments: usize,
    seed: u64,
    tol: f64,
    bx: &SampleBox,
) -> ConvexityReport {
    let mut s = Sampler::new(driver, seed, bx);
    let mut max_gap = f64::NEG_INFINITY;
    let mut n_violations = 0;
    for _ in 0..n_segments {
        let (t, x) = s.tx();
        let (y1, z1) = (s.y(), s.z());
        let (y2, z2) = (s.y(), s.z());
        let ym = 0.5 * (y1 + y2);
        let zm: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| 0.5 * (a + b)).collect();
        let f1 = driver.eval(t, &x, y1, &z1);
        let f2 = driver.eval(t, &x, y2, &z2);
        let fm = driver.eval(t, &x, ym, &zm);
        let gap = fm - 0.5 * (f1 + f2);
        max_gap = max_gap.max(gap);
        if gap > tol + rounding_allowance(f1, f2, fm) {
            n_violations += 1;
        }
    }
    ConvexityReport {
        max_gap,
        n_segments,
        n_violations,
        pass: n_violations == 0,
    }
}

/// Diagnostic fit of `|f| <= K (1 + |x|^p + |y|) + (alpha/2) |z|^2` and an
/// empirical local Lipschitz constant in `y` on `[-R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub k: f64,
    pub alpha: f64,
    pub p: u32,
    pub lipschitz: f64,
}

pub fn estimate_growth_and_lipschitz(driver: &dyn Driver, radius: f64, n_samples: usize, seed: u64) -> GrowthReport {
    estimate_growth_and_lipschitz_in(driver, radius, n_samples, seed, &SampleBox::default())
}

/// As [`estimate_growth_and_lipschitz`]; `y` is drawn from `[-radius, radius]`
/// and the other arguments from `bx`.
pub fn estimate_growth_and_lipschitz_in(
    driver: &dyn Driver,
    radius: f64,
    n_samples: usize,
    seed: u64,
    bx: &SampleBox,
) -> GrowthReport {
    let bx = SampleBox {
        y_radius: radius,
        ..bx.clone()
    };
    let mut s = Sampler::new(driver, seed, &bx);
    let mut rows = Vec::with_capacity(n_samples);
    let mut lipschitz: f64 = 0.0;
    for _ in 0..n_samples {
        let (t, x) = s.tx();
        let z = s.z();
        let (y1, y2) = (s.y(), s.y());
        let f1 = driver.eval(t, &x, y1, &z);
        let f2 = driver.eval(t, &x, y2, &z);
        if y1 != y2 {
            lipschitz = lipschitz.max((f1 - f2).abs() / (y1 - y2).abs());
        }
        let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let zn2 = z.iter().map(|v| v * v).sum::<f64>();
        rows.push((xn, y1.abs(), zn2, f1.abs()));
    }
    let mut best: Option<(f64, f64, f64, u32)> = None;
    for p in [1u32, 2] {
        let (k, a2, ssr) = fit_two(
            rows.iter()
                .map(|&(xn, ya, zn2, f)| (1.0 + xn.powi(p as i32) + ya, zn2, f)),
        );
        if best.is_none_or(|b| ssr < b.2) {
            best = Some((k, a2, ssr, p));
        }
    }
    let (k, a2, _, p) = best.unwrap_or((0.0, 0.0, 0.0, 1));
    GrowthReport {
        k,
        alpha: 2.0 * a2,
        p,
        lipschitz,
    }
}

/// Least squares `f ~ c1 a + c2 b` without intercept; returns `(c1, c2, ssr)`.
fn fit_two(rows: impl Iterator<Item = (f64, f64, f64)> + Clone) -> (f64, f64, f64) {
    let (mut aa, mut ab, mut bb, mut af, mut bf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (a, b, f) in rows.clone() {
        aa += a * a;
        ab += a * b;
        bb += b * b;
        af += a * f;
        bf += b * f;
    }
    let det = aa * bb - ab * ab;
    let (c1, c2) = if det.abs() > 1e-12 * (aa * bb).max(f64::MIN_POSITIVE) {
        ((af * bb - bf * ab) / det, (aa * bf - ab * af) / det)
    } else if aa > 0.0 {
        (af / aa, 0.0)
    } else {
        (0.0, 0.0)
    };
    let ssr = rows.map(|(a, b, f)| (f - c1 * a - c2 * b).powi(2)).sum();
    (c1, c2, ssr)
}
