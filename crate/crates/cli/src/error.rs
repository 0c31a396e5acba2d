//! Command failures and their exit codes.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration content.
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Input { path: String, source: std::io::Error },

    #[error("{path}: {source}")]
    Output { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] nqe::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn input(path: &Path, source: std::io::Error) -> Self {
        CliError::Input {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for validation failures, 3 for runtime faults.
    pub fn exit_code(&self) -> i32 {
        use nqe::Error as E;
        match self {
            CliError::Validation(_) => 2,
            CliError::Input { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Input { .. } | CliError::Output { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::Shape(_)
                | E::Format(_)
                | E::Empty(_)
                | E::NonFinite { .. }
                | E::Degenerate(_)
                | E::StageOrder(_)
                | E::Json(_) => 2,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                E::Io(_) | E::Image(_) | E::Overflow { .. } | E::Diverged { .. } => 3,
            },
        }
    }
}
