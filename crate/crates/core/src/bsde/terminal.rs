use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stochastic::PathEnsemble;

type TerminalFn = dyn Fn(&PathEnsemble, usize) -> f64 + Send + Sync;

/// Terminal functional `xi`, evaluated per path of an ensemble. It may read
/// the whole path (state and Brownian increments).
#[derive(Clone)]
pub struct Terminal {
    f: Arc<TerminalFn>,
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Terminal(..)")
    }
}

impl Terminal {
    /// `xi = g(X_T)`.
    pub fn of_state(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Terminal {
            f: Arc::new(move |e: &PathEnsemble, p| g(e.state(p, e.n_steps()))),
        }
    }

    /// `xi = g(path)` for a path-dependent functional.
    pub fn of_path(g: impl Fn(&PathEnsemble, usize) -> f64 + Send + Sync + 'static) -> Self {
        Terminal { f: Arc::new(g) }
    }

    /// `xi = a . W_T + shift`, read from the Brownian increments.
    pub fn brownian(a: &[f64], shift: f64) -> Self {
        let a = a.to_vec();
        Terminal::of_path(move |e, p| {
            let w = e.bundle().terminal(p);
            shift + a.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>()
        })
    }

    /// Fixed per-path values (indexed by path).
    pub fn from_values(values: Vec<f64>) -> Self {
        let v = Arc::new(values);
        Terminal::of_path(move |_, p| v[p])
    }

    /// `phi(xi)`.
    pub fn map(&self, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let inner = Arc::clone(&self.f);
        Terminal::of_path(move |e, p| phi(inner(e, p)))
    }

    /// `lambda xi_1 + (1 - lambda) xi_2`.
    pub fn mix(a: &Terminal, b: &Terminal, lambda: f64) -> Self {
        let (fa, fb) = (Arc::clone(&a.f), Arc::clone(&b.f));
        Terminal::of_path(move |e, p| lambda * fa(e, p) + (1.0 - lambda) * fb(e, p))
    }

    pub fn value(&self, ensemble: &PathEnsemble, path: usize) -> f64 {
        (self.f)(ensemble, path)
    }

    /// Values on every path of the ensemble.
    pub fn values(&self, ensemble: &PathEnsemble) -> Vec<f64> {
        (0..ensemble.n_paths())
            .into_par_iter()
            .map(|p| (self.f)(ensemble, p))
            .collect()
    }

    /// Named payoffs of the first state coordinate at maturity: `linear a [b]`,
    /// `abs a`, `square a`, `call k`, `put k`, `digital k`.
    pub fn from_kind(kind: &str, p: &[f64]) -> Result<Terminal> {
        Self::from_kind_inner(kind, p).map_err(Error::InvalidArgument)
    }

    fn from_kind_inner(kind: &str, p: &[f64]) -> std::result::Result<Terminal, String> {
        let need = |n: usize| {
            if p.len() == n {
                Ok(())
            } else {
                Err(format!(
                    "terminal kind `{kind}` takes {n} parameter(s), got {}",
                    p.len()
                ))
            }
        };
        Ok(match kind {
            "linear" => {
                if p.len() != 1 && p.len() != 2 {
                    return Err(format!(
                        "terminal kind `linear` takes 1 or 2 parameters, got {}",
                        p.len()
                    ));
                }
                let (a, b) = (p[0], p.get(1).copied().unwrap_or(0.0));
                Terminal::of_state(move |x| a * x[0] + b)
            }
            "abs" => {
                need(1)?;
                let a = p[0];
                Terminal::of_state(move |x| a * x[0].abs())
            }
            "square" => {
                need(1)?;
                let a = p[0];
                Terminal::of_state(move |x| a * x[0] * x[0])
            }
            "call" => {
                need(1)?;
                let k = p[0];
                Terminal::of_state(move |x| (x[0] - k).max(0.0))
            }
            "put" => {
                need(1)?;
                let k = p[0];
                Terminal::of_state(move |x| (k - x[0]).max(0.0))
            }
            "digital" => {
                need(1)?;
                let k = p[0];
                Terminal::of_state(move |x| if x[0] > k { 1.0 } else { 0.0 })
            }
            other => return Err(format!("unknown terminal kind `{other}`")),
        })
    }
}
