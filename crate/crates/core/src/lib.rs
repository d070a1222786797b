//! Numerical laboratory for neural expectation operators.
//!
//! A neural expectation is the value process `Y` of a backward SDE whose
//! driver is a small, structurally constrained neural network. This crate
//! provides:
//!
//! - [`stochastic`]: time grids, seedable Brownian bundles, Euler forward
//!   simulation and the 1-D quadratic Wasserstein distance.
//! - [`nets`]: driver networks (free, separable, bounded-interaction,
//!   monotone-in-y, input-convex in (y, z)) with exact analytic gradients,
//!   plus closed-form built-in drivers.
//! - [`bsde`]: least-squares Monte Carlo BSDE solver, closed-form oracles,
//!   axiom harnesses, truncation, dual bounds and coupled FBSDE Picard.
//! - [`sensitivity`]: parameter gradients via the differentiated BSDE, losses
//!   and the SGD training loop.
//! - [`meanfield`]: interacting particles, McKean-Vlasov fixed points and
//!   the LLN/CLT experiment harnesses.
//! - [`merton`]: the Merton problem under quadratic ambiguity, solved by an
//!   explicit finite-difference HJB scheme, with calibration of the
//!   ambiguity parameter.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod error;
pub mod meanfield;
pub mod merton;
pub mod nets;
pub mod rng;
pub mod sensitivity;
pub mod stochastic;

pub use error::{Error, Result};
