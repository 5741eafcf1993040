use std::path::{Path, PathBuf};

use fpd_core::Error as CoreError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const CONTINUITY: i32 = 3;
    pub const INFEASIBLE: i32 = 4;
    pub const NON_CONVERGENCE: i32 = 5;
    pub const MISMATCH: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}, line {line}: {message}", path.display())]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("absolute continuity check failed: {0}")]
    Continuity(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("audit failed: {0}")]
    Audit(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: u64, message: impl Into<String>) -> CliError {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Parse { .. } => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Continuity(_) => exit::CONTINUITY,
            CliError::Mismatch(_) => exit::MISMATCH,
            CliError::Audit(_) => exit::NON_CONVERGENCE,
            CliError::Core(e) => match e.root() {
                CoreError::InfeasibleConstraints { .. } | CoreError::DivergingMultipliers { .. } => exit::INFEASIBLE,
                CoreError::NonConvergence { .. } | CoreError::Overflow { .. } => exit::NON_CONVERGENCE,
                CoreError::AbsoluteContinuity { .. } | CoreError::RowAbsoluteContinuity { .. } => exit::CONTINUITY,
                CoreError::GridMismatch(_) => exit::MISMATCH,
                _ => exit::CONFIG,
            },
        }
    }
}
