//! Scenario-driven front end for `obsv-core`: loads TOML scenarios, runs the
//! simulate, check, estimate and observe commands, and renders CSV and JSON
//! outputs.

pub mod commands;
pub mod output;
pub mod scenario;
pub mod summary;

pub use commands::{run, Command, Report, RunOptions, Status};
pub use scenario::ScenarioConfig;
pub use summary::RunSummary;

use obsv_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("cannot write outputs: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::Dimension(_)
            | Error::Expr(_)
            | Error::Build(_)
            | Error::Unsupported(_)
            | Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            Error::IntegrationDiverged { .. }
            | Error::NonFinite { .. }
            | Error::GramianSingular { .. }
            | Error::SingularFundamental { .. }
            | Error::Eval { .. }
            | Error::GridTooCoarse { .. } => CliError::Numerical(e.to_string()),
        }
    }
}
