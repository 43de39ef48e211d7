use thiserror::Error;

/// Errors raised by the library. Each variant maps to a CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver did not converge after {sweeps} sweeps (kkt violation {violation:.3e})")]
    NonConvergence { sweeps: usize, violation: f64 },
    #[error("certification failed: {0}")]
    Certification(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonConvergence { .. } => 3,
            Error::Certification(_) => 4,
            _ => 2,
        }
    }
}
