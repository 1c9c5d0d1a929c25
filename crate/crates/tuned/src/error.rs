//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. Reports both shapes.
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A scalar argument is outside the mathematical domain of a function.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An input violates a documented precondition or invariant.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A configuration value is invalid or unknown.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion failed (row mismatch, bad cell, label out of range).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Model file has an unsupported version tag.
    #[error("model version mismatch: expected magic {expected:?}, found {found:?}")]
    ModelVersion { expected: String, found: String },

    /// Model file is truncated or structurally invalid.
    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
