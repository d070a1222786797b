//! Driver networks with structural constraints and exact first derivatives.

mod activation;
mod builtin;
mod driver_net;
mod mlp;
mod verify;

pub use activation::{sigmoid, softplus, softplus_inverse, Activation};
pub use builtin::{BuiltinDriver, BuiltinKind};
pub use driver_net::{build_driver, eval_driver, ArchitectureKind, DriverNet, Layout};
pub use verify::{
    estimate_growth_and_lipschitz, estimate_growth_and_lipschitz_in, verify_convexity, verify_convexity_in,
    verify_monotone, verify_monotone_in, ConvexityReport, GrowthReport, MonotoneReport, SampleBox,
};

use crate::error::Result;

/// Value of a driver together with its first derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverGradients {
    pub value: f64,
    pub dy: f64,
    pub dz: Vec<f64>,
    /// Gradient with respect to the raw parameter vector.
    pub dtheta: Vec<f64>,
}

/// A BSDE driver `f(t, x, y, z)` with parameters `theta`.
pub trait Driver: Send + Sync {
    /// Required state dimension, `None` if any is accepted.
    fn x_dim(&self) -> Option<usize>;
    /// Required noise dimension, `None` if any is accepted.
    fn z_dim(&self) -> Option<usize>;
    fn params(&self) -> &[f64];
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;
    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverGradients;
    /// A copy with a new parameter vector of the same length.
    fn with_params(&self, params: &[f64]) -> Result<Self>
    where
        Self: Sized;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    /// [`Driver::gradients`] into caller buffers; returns `(value, dy)`.
    fn gradients_into(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64], dtheta: &mut [f64]) -> (f64, f64) {
        let g = self.gradients(t, x, y, z);
        dz.copy_from_slice(&g.dz);
        dtheta.copy_from_slice(&g.dtheta);
        (g.value, g.dy)
    }

    /// Whether the driver accepts the given state and noise dimensions.
    fn accepts(&self, x_dim: usize, z_dim: usize) -> bool {
        self.x_dim().is_none_or(|n| n == x_dim) && self.z_dim().is_none_or(|d| d == z_dim)
    }
}

/// Either a network or a built-in closed-form driver.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDriver {
    Net(DriverNet),
    Builtin(BuiltinDriver),
}

impl From<DriverNet> for AnyDriver {
    fn from(n: DriverNet) -> Self {
        AnyDriver::Net(n)
    }
}

impl From<BuiltinDriver> for AnyDriver {
    fn from(b: BuiltinDriver) -> Self {
        AnyDriver::Builtin(b)
    }
}

impl Driver for AnyDriver {
    fn x_dim(&self) -> Option<usize> {
        match self {
            AnyDriver::Net(n) => n.x_dim(),
            AnyDriver::Builtin(b) => b.x_dim(),
        }
    }

    fn z_dim(&self) -> Option<usize> {
        match self {
            AnyDriver::Net(n) => n.z_dim(),
            AnyDriver::Builtin(b) => b.z_dim(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            AnyDriver::Net(n) => n.params(),
            AnyDriver::Builtin(b) => b.params(),
        }
    }

    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match self {
            AnyDriver::Net(n) => n.eval(t, x, y, z),
            AnyDriver::Builtin(b) => b.eval(t, x, y, z),
        }
    }

    fn gradients(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> DriverGradients {
        match self {
            AnyDriver::Net(n) => n.gradients(t, x, y, z),
            AnyDriver::Builtin(b) => b.gradients(t, x, y, z),
        }
    }

    fn gradients_into(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64], dtheta: &mut [f64]) -> (f64, f64) {
        match self {
            AnyDriver::Net(n) => n.gradients_into(t, x, y, z, dz, dtheta),
            AnyDriver::Builtin(b) => b.gradients_into(t, x, y, z, dz, dtheta),
        }
    }

    fn with_params(&self, params: &[f64]) -> Result<Self> {
        Ok(match self {
            AnyDriver::Net(n) => AnyDriver::Net(n.with_params(params)?),
            AnyDriver::Builtin(b) => AnyDriver::Builtin(b.with_params(params)?),
        })
    }
}
