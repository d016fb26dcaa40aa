use thiserror::Error;

use crate::training::TrajectoryRecord;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A forward trace no longer matches the weights it is paired with.
    #[error("stale forward trace: pattern of layer {layer} disagrees with the weights")]
    StaleTrace { layer: usize },

    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    /// Training left the finite regime. `trajectory` holds every healthy row.
    #[error("training diverged; last finite iteration was {last_finite}")]
    Diverged {
        last_finite: usize,
        trajectory: Box<TrajectoryRecord>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Numeric(_)
            | Error::StaleTrace { .. }
            | Error::NoConvergence { .. }
            | Error::Diverged { .. } => 3,
            Error::Infeasible(_) => 4,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
