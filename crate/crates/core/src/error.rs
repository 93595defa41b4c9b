use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine. The CLI maps each variant onto an
/// exit-code category (validation vs numerical/IO failure).
#[derive(Debug, Error)]
pub enum TtsoError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numerical failure at iteration {iteration}: {what}")]
    Numerical { iteration: usize, what: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("parse error in {file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TtsoError {
    pub fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        TtsoError::Dimension { context, expected, got }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TtsoError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad user input rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TtsoError::Config(_)
                | TtsoError::Dimension { .. }
                | TtsoError::Input(_)
                | TtsoError::Parse { .. }
                | TtsoError::Manifest(_)
                | TtsoError::Contract(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, TtsoError>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(TtsoError::dim(context, expected, got));
    }
    Ok(())
}
