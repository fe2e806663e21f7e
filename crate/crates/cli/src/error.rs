use std::path::Path;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] nullcontrol::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// 1 for invalid input, 2 for numerical failure.
    pub fn exit_code(&self) -> u8 {
        use nullcontrol::Error as E;
        match self {
            Self::Numerical(_) => 2,
            Self::Core(E::Numerical(_) | E::AdjointGate(_) | E::Singular { .. }) => 2,
            _ => 1,
        }
    }
}
