//! Time discretization, Brownian increments, forward SDE simulation and
//! empirical-measure distances.

mod brownian;
mod forward;
mod grid;
mod wasserstein;

pub use brownian::{sample_brownian, BrownianBundle};
pub use forward::{
    simulate_forward, simulate_forward_coupled, BrownianMotion, Coupling, CouplingField, ForwardModel,
    GeometricBrownian, PathEnsemble, ScalarLinearSde,
};
pub use grid::{make_time_grid, TimeGrid};
pub use wasserstein::{wasserstein2_1d, wasserstein2_squared_1d};
