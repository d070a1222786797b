//! Merton portfolio choice under the quadratic ambiguity driver
//! `f = -(theta/2) z^2`: an explicit finite-difference HJB solver in
//! log-wealth, the resulting allocation policy, property checks and the
//! calibration of `theta` from observed allocations.

mod analysis;
mod hjb;
mod market;

pub use analysis::{
    bsde_cross_check, calibrate_theta, model_allocations, observations_to_csv, read_observations,
    verify_ambiguity_properties, AllocationObservation, AmbiguityReport, CalibrationResult, CalibrationSearch,
    CrossCheck, WealthDiagnostic, WealthTrend,
};
pub use hjb::{
    extract_policy, required_time_steps, solve_fixed_policy, solve_hjb, HjbGrid, HjbGridSpec, PolicyQuery,
    PolicySurface,
};
pub use market::{classical_merton, ClassicalMerton, MarketParams};
