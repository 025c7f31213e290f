use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or inconsistent configuration, flags or input files (exit 2).
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical step failed: non-convergence, singularity, failed check (exit 1).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Writing outputs failed (exit 1).
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Output(_) => 1,
        }
    }
}

impl From<ensemble_bridge::Error> for CliError {
    fn from(e: ensemble_bridge::Error) -> Self {
        use ensemble_bridge::Error as E;
        match e {
            E::InvalidMatrix(_) | E::InvalidParameter(_) | E::OutOfRange { .. } | E::Data(_) => {
                CliError::Config(e.to_string())
            }
            E::Io(_) => CliError::Output(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
