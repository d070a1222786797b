//! Per-step polynomial least squares used as the conditional-expectation
//! estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Regressions whose Gram matrix has a larger condition number are
/// rejected as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Largest state dimension the polynomial basis supports.
pub const MAX_STATE_DIM: usize = 5;

/// Largest supported polynomial degree.
pub const MAX_DEGREE: u32 = 7;

const CHUNK: usize = 2048;

/// Global polynomial basis of total degree `degree` in the standardized
/// state coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressionBasis {
    pub degree: u32,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3 }
    }
}

impl RegressionBasis {
    pub fn new(degree: u32) -> Self {
        RegressionBasis { degree }
    }
}

/// A fitted design for one set of states: standardization, monomials and a
/// factorized Gram matrix. Coordinates that are constant across paths are
/// dropped (so a deterministic state reduces the basis to the constant).
#[derive(Debug, Clone)]
pub struct Regressor {
    mean: Vec<f64>,
    scale: Vec<f64>,
    active: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    degree: u32,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    cond: f64,
}

fn exponent_tuples(dims: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![];
    let mut cur = vec![0u32; dims];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[i] = e;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), std::cmp::Reverse(e.clone())));
    out
}

/// Deterministic parallel sum over fixed chunks of paths: partial results
/// are combined in chunk order, so the result does not depend on the
/// thread count.
pub(crate) fn chunked_sum<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            f(c * CHUNK..((c + 1) * CHUNK).min(n), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

impl Regressor {
    /// Builds the design for `states`, laid out `[path][dim]`.
    pub fn new(basis: RegressionBasis, states: &[f64], dim: usize, step: usize) -> Result<Self> {
        if dim > MAX_STATE_DIM {
            return Err(Error::InvalidArgument(format!(
                "polynomial basis supports state dimension up to {MAX_STATE_DIM}, got {dim}"
            )));
        }
        if basis.degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "polynomial degree at most {MAX_DEGREE} is supported, got {}",
                basis.degree
            )));
        }
        let n = states.len() / dim.max(1);
        if n == 0 {
            return Err(Error::InvalidArgument("no paths to regress on".into()));
        }
        let sums = chunked_sum(n, 2 * dim, |r, acc| {
            for p in r {
                for i in 0..dim {
                    let v = states[p * dim + i];
                    acc[i] += v;
                    acc[dim + i] += v * v;
                }
            }
        });
        let mut mean = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        let mut active = vec![];
        for i in 0..dim {
            let m = sums[i] / n as f64;
            let var = (sums[dim + i] / n as f64 - m * m).max(0.0);
            mean[i] = m;
            let sd = var.sqrt();
            let spread = states.chunks(dim).map(|x| (x[i] - m).abs()).fold(0.0, f64::max);
            if spread > 1e-12 * (1.0 + m.abs()) && sd > 0.0 {
                scale[i] = sd;
                active.push(i);
            }
        }
        let exponents = exponent_tuples(active.len(), basis.degree);
        let mut reg = Regressor {
            mean,
            scale,
            active,
            exponents,
            degree: basis.degree,
            chol: nalgebra::Cholesky::new(DMatrix::identity(1, 1)).expect("identity"),
            cond: 1.0,
        };
        let m = reg.size();
        let gram_flat = chunked_sum(n, m * m, |r, acc| {
            let mut phi = vec![0.0; m];
            for p in r {
                reg.features_into(&states[p * dim..(p + 1) * dim], &mut phi);
                for a in 0..m {
                    let pa = phi[a];
                    for b in a..m {
                        acc[a * m + b] += pa * phi[b];
                    }
                }
            }
        });
        let mut gram = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in a..m {
                let v = gram_flat[a * m + b] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::SingularRegression { step, cond });
        }
        reg.cond = cond;
        reg.chol = nalgebra::Cholesky::new(gram).ok_or(Error::SingularRegression { step, cond })?;
        Ok(reg)
    }

    /// Number of basis functions.
    pub fn size(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// Condition number of the normalized Gram matrix.
    pub fn condition_number(&self) -> f64 {
        self.cond
    }

    /// Basis values at state `x`.
    pub fn features_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.degree as usize;
        let mut pows = [[1.0f64; MAX_DEGREE as usize + 1]; MAX_STATE_DIM];
        for (k, &i) in self.active.iter().enumerate() {
            let s = (x[i] - self.mean[i]) / self.scale[i];
            for e in 1..=d {
                pows[k][e] = pows[k][e - 1] * s;
            }
        }
        for (o, exps) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (k, &e) in exps.iter().enumerate() {
                v *= pows[k][e as usize];
            }
            *o = v;
        }
    }

    /// Design matrix over a set of states; rows are cached when small enough.
    pub fn design<'a>(&'a self, states: &'a [f64], dim: usize) -> Design<'a> {
        let n = states.len() / dim.max(1);
        let m = self.size();
        let phi = (n * m <= DESIGN_CACHE_LIMIT).then(|| {
            let mut phi = vec![0.0; n * m];
            phi.par_chunks_mut(CHUNK * m).enumerate().for_each(|(c, block)| {
                for (i, row) in block.chunks_mut(m).enumerate() {
                    let p = c * CHUNK + i;
                    self.features_into(&states[p * dim..(p + 1) * dim], row);
                }
            });
            phi
        });
        Design {
            reg: self,
            states,
            dim,
            n,
            phi,
        }
    }

    /// Least-squares coefficients for each target (targets indexed by path).
    pub fn fit(&self, states: &[f64], dim: usize, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        self.design(states, dim).fit(targets)
    }

    /// Evaluates a fitted expansion at `x`.
    pub fn predict(&self, coef: &[f64], x: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.size()];
        self.features_into(x, &mut phi);
        phi.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    /// Fitted values of several expansions at every path; result is
    /// `[target][path]`.
    pub fn predict_all(&self, coefs: &[Vec<f64>], states: &[f64], dim: usize) -> Vec<Vec<f64>> {
        self.design(states, dim).predict(coefs)
    }
}

/// Largest cached design matrix, in entries.
const DESIGN_CACHE_LIMIT: usize = 1 << 23;

/// Basis values of one regressor at a fixed set of states.
pub struct Design<'a> {
    reg: &'a Regressor,
    states: &'a [f64],
    dim: usize,
    n: usize,
    phi: Option<Vec<f64>>,
}

impl Design<'_> {
    fn with_row<R>(&self, p: usize, buf: &mut [f64], f: impl FnOnce(&[f64]) -> R) -> R {
        match &self.phi {
            Some(phi) => {
                let m = buf.len();
                f(&phi[p * m..(p + 1) * m])
            }
            None => {
                self.reg
                    .features_into(&self.states[p * self.dim..(p + 1) * self.dim], buf);
                f(buf)
            }
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n
    }

    /// Least-squares coefficients for each target (targets indexed by path).
    pub fn fit(&self, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let m = self.reg.size();
        let nt = targets.len();
        let rhs = chunked_sum(self.n, m * nt, |r, acc| {
            let mut buf = vec![0.0; m];
            for p in r {
                self.with_row(p, &mut buf, |phi| {
                    for (j, t) in targets.iter().enumerate() {
                        let v = t[p];
                        for a in 0..m {
                            acc[j * m + a] += phi[a] * v;
                        }
                    }
                });
            }
        });
        (0..nt)
            .map(|j| {
                let b = DVector::from_iterator(m, rhs[j * m..(j + 1) * m].iter().map(|v| v / self.n as f64));
                self.reg.chol.solve(&b).iter().cloned().collect()
            })
            .collect()
    }

    /// Fitted values of several expansions at every path; `[target][path]`.
    pub fn predict(&self, coefs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.n;
        let m = self.reg.size();
        let nt = coefs.len();
        let mut out = vec![vec![0.0; n]; nt];
        if nt == 0 {
            return out;
        }
        let parts: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let r = c * CHUNK..((c + 1) * CHUNK).min(n);
                let mut buf = vec![0.0; m];
                let mut vals = Vec::with_capacity(r.len() * nt);
                for p in r {
                    self.with_row(p, &mut buf, |phi| {
                        vals.extend(coefs.iter().map(|c| phi.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()));
                    });
                }
                vals
            })
            .collect();
        for (c, part) in parts.iter().enumerate() {
            for (i, row) in part.chunks(nt).enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[j][c * CHUNK + i] = *v;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(exponent_tuples(1, 3).len(), 4);
        assert_eq!(exponent_tuples(2, 3).len(), 10);
        assert_eq!(exponent_tuples(0, 3).len(), 1);
        assert_eq!(exponent_tuples(2, 2)[0], vec![0, 0]);
    }

    #[test]
    fn reproduces_polynomials_exactly() {
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let r = Regressor::new(RegressionBasis::new(3), &xs, 1, 0).unwrap();
        let c = r.fit(&xs, 1, &[&y]);
        for (x, v) in xs.iter().zip(&y) {
            assert!((r.predict(&c[0], &[*x]) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_state_reduces_to_mean() {
        let xs = vec![2.0; 10];
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let r = Regressor::new(RegressionBasis::new(3), &xs, 1, 0).unwrap();
        assert_eq!(r.size(), 1);
        let c = r.fit(&xs, 1, &[&y]);
        assert!((r.predict(&c[0], &[2.0]) - 4.5).abs() < 1e-14);
    }

    #[test]
    fn collinear_design_is_singular() {
        // Two identical coordinates make the degree-1 basis rank deficient.
        let xs: Vec<f64> = (0..50).flat_map(|i| [i as f64, i as f64]).collect();
        match Regressor::new(RegressionBasis::new(1), &xs, 2, 7) {
            Err(Error::SingularRegression { step, cond }) => {
                assert_eq!(step, 7);
                assert!(cond > MAX_CONDITION);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chunked_sum_is_exact_order() {
        let s = chunked_sum(10_000, 1, |r, acc| {
            for i in r {
                acc[0] += i as f64;
            }
        });
        assert_eq!(s[0], 49_995_000.0);
    }
}
