use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("simulation diverged at path {path}, step {step}")]
    SimulationDiverged { path: usize, step: usize },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("singular regression at step {step} (condition number {cond:.3e})")]
    SingularRegression { step: usize, cond: f64 },

    #[error("BSDE solver diverged at step {step}")]
    SolverDiverged { step: usize },

    #[error("oracle overflow: {0}")]
    OracleOverflow(String),

    #[error("invalid comparison pair: xi1 < xi2 on path {path}")]
    InvalidComparisonPair { path: usize },

    #[error("Picard iteration is not contracting (residuals {residuals:?}); the horizon is likely too long")]
    NoContraction { residuals: Vec<f64> },

    #[error("invalid driver: {0}")]
    InvalidDriver(String),

    #[error("McKean-Vlasov iteration found no fixed point (residuals {residuals:?})")]
    NoFixedPoint { residuals: Vec<f64> },

    #[error("incomplete fluctuation coefficients: missing {0}")]
    IncompleteCoefficients(String),

    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged { iteration: usize },

    #[error("unstable grid: explicit scheme needs at least {required_steps} time steps")]
    UnstableGrid { required_steps: usize },

    #[error("HJB solver inconsistent at time step {step}, node {node}: {reason}")]
    SolverInconsistent { step: usize, node: usize, reason: String },

    #[error("record {record}: {source}")]
    Record {
        record: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures of the numerics (divergence, singularity) as opposed
    /// to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SimulationDiverged { .. }
            | Error::SingularRegression { .. }
            | Error::SolverDiverged { .. }
            | Error::OracleOverflow(_)
            | Error::NoContraction { .. }
            | Error::NoFixedPoint { .. }
            | Error::TrainingDiverged { .. }
            | Error::SolverInconsistent { .. } => true,
            Error::Record { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
