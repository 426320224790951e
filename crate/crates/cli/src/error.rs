use slowman::SlowError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] SlowError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const NOT_CONVERGED: i32 = 4;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::VALIDATION,
            CliError::Core(e) => match e {
                SlowError::Invalid(_) | SlowError::Domain(_) | SlowError::Degenerate(_) | SlowError::Precision(_) => {
                    exit::VALIDATION
                }
                SlowError::Divergence { .. } | SlowError::IterationDiverged { .. } | SlowError::Numerical(_) => {
                    exit::DIVERGENCE
                }
                SlowError::RootFinding(_) => exit::NOT_CONVERGED,
                SlowError::Bracket(_) | SlowError::Fit(_) => exit::FAILURE,
            },
            CliError::Io(_) | CliError::Json(_) => exit::FAILURE,
        }
    }
}
