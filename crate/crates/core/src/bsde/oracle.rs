use crate::error::{Error, Result};

/// Driver families with closed-form `Y0`.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleKind {
    /// `f = 0`: `Y0 = E[xi]`.
    Zero,
    /// `f = b . z`: `Y0 = E[xi exp(b . W_T - |b|^2 T / 2)]`.
    Linear { b: Vec<f64> },
    /// `f = -(theta/2) |z|^2`: `Y0 = -(1/theta) log E[exp(-theta xi)]`.
    Entropic { theta: f64 },
}

/// `log sum exp(a_i)` with the usual max shift.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Monte Carlo value of a closed-form driver family on terminal samples.
/// The linear family also needs `W_T` per sample (`w_t[i]` of length `d`).
pub fn closed_form_oracle(kind: &OracleKind, xi: &[f64], w_t: Option<&[Vec<f64>]>, horizon: f64) -> Result<f64> {
    if xi.is_empty() {
        return Err(Error::InvalidArgument("no terminal samples".into()));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::OracleOverflow("terminal samples are not finite".into()));
    }
    let n = xi.len() as f64;
    let out = match kind {
        OracleKind::Zero => xi.iter().sum::<f64>() / n,
        OracleKind::Entropic { theta } => {
            if *theta == 0.0 {
                return Err(Error::InvalidArgument("entropic oracle needs theta != 0".into()));
            }
            let a: Vec<f64> = xi.iter().map(|v| -theta * v).collect();
            -(log_sum_exp(&a) - n.ln()) / theta
        }
        OracleKind::Linear { b } => {
            let w = w_t.ok_or_else(|| Error::InvalidArgument("linear oracle needs W_T for every sample".into()))?;
            if w.len() != xi.len() || w.iter().any(|v| v.len() != b.len()) {
                return Err(Error::InvalidArgument("W_T samples have the wrong shape".into()));
            }
            let b2: f64 = b.iter().map(|v| v * v).sum();
            let logw: Vec<f64> = w
                .iter()
                .map(|wt| b.iter().zip(wt).map(|(b, w)| b * w).sum::<f64>() - 0.5 * b2 * horizon)
                .collect();
            let lse = log_sum_exp(&logw);
            xi.iter().zip(&logw).map(|(x, l)| x * (l - lse).exp()).sum()
        }
    };
    if !out.is_finite() {
        return Err(Error::OracleOverflow(format!("oracle value is {out}")));
    }
    Ok(out)
}
