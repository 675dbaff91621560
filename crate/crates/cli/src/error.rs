use thiserror::Error;

/// Failures surfaced to the command line, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, unreadable or unwritable files.
    #[error("{0}")]
    Input(String),
    /// Estimation broke down numerically.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

pub const EXIT_NOT_CONVERGED: u8 = 2;
