//! Interacting particle systems with BSDE valuations, their McKean-Vlasov
//! limit, and the law-of-large-numbers and fluctuation experiments.
//!
//! Everything here is scalar (state and noise dimension 1). Coefficients
//! see the measure only through a declared list of empirical features.

mod experiments;
mod fluctuation;
mod model;
mod particles;

pub use experiments::{
    clt_experiment, coupled_errors, lln_experiment, log_log_slope, CltRow, CltSummary, CltTable, ExperimentOptions,
    LlnRow, LlnSummary, LlnTable,
};
pub use fluctuation::{solve_fluctuation_system, FluctuationCoefficients, FluctuationOptions, FluctuationSolution};
pub use model::{
    builtin_fluctuation, builtin_model, empirical_features, Feature, InitialLaw, LinearMeanField, MeanFieldModel,
    BUILTIN_MODELS, LINEAR_GAUSSIAN_CLT, LINEAR_MEAN_FIELD,
};
pub use particles::{
    simulate_particles, simulate_particles_labeled, solve_mckean_vlasov, FeatureFlow, FixedPointOptions,
    MeanFieldSolution, ParticleRun,
};
