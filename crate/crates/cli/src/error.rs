use std::path::Path;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    /// Bad flags, config or arguments (also used by the argument parser).
    pub const VALIDATION: i32 = 2;
    /// Training aborted on a non-finite loss, gradient or parameter.
    pub const NUMERIC: i32 = 3;
    /// A file could not be read, written or parsed.
    pub const IO: i32 = 4;
    /// The gradient audit found a backward pass out of tolerance.
    pub const GRADCHECK: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient audit failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] imgalign::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use imgalign::Error as E;
        match self {
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Io { .. } => exit::IO,
            CliError::GradCheck(_) => exit::GRADCHECK,
            CliError::Core(e) => match e {
                E::Config(_) | E::Argument(_) | E::Shape { .. } => exit::VALIDATION,
                E::NonFinite { .. } => exit::NUMERIC,
                E::Parse { .. } | E::Version { .. } | E::Io(_) => exit::IO,
            },
        }
    }
}
