//! Error types shared across the crate.

use crate::graph::Violation;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SgmError>;

#[derive(Debug, Error)]
pub enum SgmError {
    /// Shapes do not line up for an operation. Always names both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An API precondition was broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Scene-graph data failed invariant checks.
    #[error("validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),

    /// Cross-file references do not resolve (e.g. feature counts off).
    #[error("corpus integrity: {0}")]
    Integrity(String),

    /// A file exists but its contents cannot be decoded.
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    /// Training produced a non-finite loss; names the first bad tensor.
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl SgmError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        SgmError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        SgmError::Contract(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SgmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, detail: impl Into<String>) -> Self {
        SgmError::Parse {
            path: path.as_ref().display().to_string(),
            detail: detail.into(),
        }
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
