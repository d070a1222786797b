//! Backward least-squares Monte Carlo for BSDEs and the harnesses built on
//! it.

mod axioms;
mod dual;
mod fbsde;
mod oracle;
mod regression;
pub(crate) mod solver;
mod terminal;

pub use axioms::{
    check_comparison, check_convexity_and_jensen, check_dynamic_consistency, drift_reconstruction_residuals,
    effective_drift_decomposition, C2Fn, ComparisonReport, ConsistencyReport, ConvexityJensenReport,
    DriftDecomposition,
};
pub use dual::{dual_lower_bound, ConjugateGrid, DualReport};
pub use fbsde::{solve_fbsde_picard, FbsdeResult, PicardOptions};
pub use oracle::{closed_form_oracle, log_sum_exp, OracleKind};
pub use regression::{Design, RegressionBasis, Regressor, MAX_CONDITION, MAX_DEGREE, MAX_STATE_DIM};
pub use solver::{solve_bsde_lsmc, solve_truncated, BsdeProblem, BsdeSolution, FieldSurfaces, SolverOptions, ZClip};
pub use terminal::Terminal;
