//! Error types shared by every module of the crate.

use thiserror::Error;

use crate::dataio::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("label at row {row}, column {col} is {value}, expected 0 or 1")]
    NonBinaryLabel { row: usize, col: usize, value: f64 },

    /// A matrix entry was NaN or infinite.
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    /// The objective evaluated by a finite-difference probe was not finite.
    #[error("function not finite when perturbing coordinate {0}")]
    NonFiniteEvaluation(usize),

    /// A metric has no defined value on these inputs (e.g. AP without positives).
    #[error("{metric} undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn undefined(metric: &'static str, reason: impl Into<String>) -> Self {
        Error::Undefined {
            metric,
            reason: reason.into(),
        }
    }
}
