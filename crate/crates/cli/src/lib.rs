//! Config-driven experiment runner for `nexp-core`.
//!
//! A run is one JSON config (see [`config::ExperimentConfig`]) that names an
//! experiment kind, a mandatory seed and the problem. [`run::run_experiment`]
//! dispatches to the core crate, writes CSV artifacts plus `report.json` into
//! the output directory, and returns a [`report::RunReport`].

pub mod config;
pub mod report;
pub mod run;

pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig, Overrides};
pub use report::{emit_report, ReportFormat, RunReport};
pub use run::run_experiment;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: nexp_core::Error,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn core(context: impl Into<String>, source: nexp_core::Error) -> Self {
        CliError::Core {
            context: context.into(),
            source,
        }
    }

    /// 2 for bad configs or inputs, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core { source, .. } if source.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
