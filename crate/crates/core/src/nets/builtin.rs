use super::{Driver, DriverGradients};
use crate::error::{Error, Result};

/// Closed-form drivers with known BSDE solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BuiltinKind {
    /// `f = 0`.
    Zero,
    /// `f = b . z`, parameters `b`.
    Linear,
    /// `f = -(theta/2) |z|^2`, parameter `theta`.
    Entropic,
    /// `f = (theta/2) |z|^2`, parameter `theta`.
    ConvexQuadratic,
    /// `f = theta * c`, parameter `theta`.
    Constant { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinDriver {
    kind: BuiltinKind,
    params: Vec<f64>,
}

impl BuiltinDriver {
    pub fn zero() -> Self {
        BuiltinDriver {
            kind: BuiltinKind::Zero,
            params: vec![],
        }
    }

    pub fn linear(b: &[f64]) -> Self {
        BuiltinDriver {
            kind: BuiltinKind::Linear,
            params: b.to_vec(),
        }
    }

    pub fn entropic(theta: f64) -> Self {
        BuiltinDriver {
            kind: BuiltinKind::Entropic,
            params: vec![theta],
        }
    }

    pub fn convex_quadratic(theta: f64) -> Self {
        BuiltinDriver {
            kind: BuiltinKind::ConvexQuadratic,
            params: vec![theta],
        }
    }

    pub fn constant(theta: f64, c: f64) -> Self {
        BuiltinDriver {
            kind: BuiltinKind::Constant { c },
            params: vec![theta],
        }
    }

    pub fn kind(&self) -> BuiltinKind {
        self.kind
    }

    fn expected_params(&self) -> Option<usize> {
        match self.kind {
            BuiltinKind::Zero => Some(0),
            BuiltinKind::Linear => None,
            _ => Some(1),
        }
    }
}

fn norm2(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum()
}

impl Driver for BuiltinDriver {
    fn x_dim(&self) -> Option<usize> {
        None
    }

    fn z_dim(&self) -> Option<usize> {
        match self.kind {
            BuiltinKind::Linear => Some(self.params.len()),
            _ => None,
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn eval(&self, _t: f64, _x: &[f64], _y: f64, z: &[f64]) -> f64 {
        match self.kind {
            BuiltinKind::Zero => 0.0,
            BuiltinKind::Linear => self.params.iter().zip(z).map(|(b, z)| b * z).sum(),
            BuiltinKind::Entropic => -0.5 * self.params[0] * norm2(z),
            BuiltinKind::ConvexQuadratic => 0.5 * self.params[0] * norm2(z),
            BuiltinKind::Constant { c } => self.params[0] * c,
        }
    }

    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverGradients {
        let value = self.eval(t, x, y, z);
        let (dz, dtheta) = match self.kind {
            BuiltinKind::Zero => (vec![0.0; z.len()], vec![]),
            BuiltinKind::Linear => (self.params.clone(), z.to_vec()),
            BuiltinKind::Entropic => (z.iter().map(|v| -self.params[0] * v).collect(), vec![-0.5 * norm2(z)]),
            BuiltinKind::ConvexQuadratic => (z.iter().map(|v| self.params[0] * v).collect(), vec![0.5 * norm2(z)]),
            BuiltinKind::Constant { c } => (vec![0.0; z.len()], vec![c]),
        };
        DriverGradients {
            value,
            dy: 0.0,
            dz,
            dtheta,
        }
    }

    fn gradients_into(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64], dtheta: &mut [f64]) -> (f64, f64) {
        let value = self.eval(t, x, y, z);
        match self.kind {
            BuiltinKind::Zero => dz.fill(0.0),
            BuiltinKind::Linear => {
                dz.copy_from_slice(&self.params);
                dtheta.copy_from_slice(z);
            }
            BuiltinKind::Entropic | BuiltinKind::ConvexQuadratic => {
                let s = if self.kind == BuiltinKind::Entropic { -1.0 } else { 1.0 };
                for (o, v) in dz.iter_mut().zip(z) {
                    *o = s * self.params[0] * v;
                }
                dtheta[0] = s * 0.5 * norm2(z);
            }
            BuiltinKind::Constant { c } => {
                dz.fill(0.0);
                dtheta[0] = c;
            }
        }
        (value, 0.0)
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        let want = self.expected_params().unwrap_or(self.params.len());
        if params.len() != want {
            return Err(Error::InvalidArgument(format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(BuiltinDriver {
            kind: self.kind,
            params: params.to_vec(),
        })
    }
}
