use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by frontends to choose an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input, bad configuration, or inputs that do not line up.
    Validation,
    /// Unreadable files or malformed containers.
    Format,
    /// Singular systems, non-finite values, overflow.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFiniteInput(String),

    #[error("value {value} overflows {target} in {context}")]
    OverflowOnCast {
        value: f64,
        target: &'static str,
        context: String,
    },

    #[error("singular Gram matrix: {0}")]
    SingularGram(String),

    #[error("key mismatch: missing [{}], extra [{}]", missing.join(", "), extra.join(", "))]
    KeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("task vector built against base {found:016x}, expected {expected:016x}")]
    BaseMismatch { expected: u64, found: u64 },

    #[error("model {index} has zero norm over its mergeable tensors")]
    ZeroNormModel { index: usize },

    #[error("bad weights: {0}")]
    BadWeights(String),

    #[error("trim fraction {0} outside (0, 1]")]
    BadTrim(f64),

    #[error("Gram shape mismatch: {0}")]
    GramShapeMismatch(String),

    #[error("invalid recipe: {0}")]
    RecipeInvalid(String),

    #[error("recipe parse error: {0}")]
    RecipeParse(String),

    #[error("corrupt header {location}: {reason}")]
    CorruptHeader { location: String, reason: String },

    #[error("unsupported dtype {dtype} for tensor {name}")]
    UnsupportedDType { name: String, dtype: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::ShapeMismatch(_)
            | Error::DimensionMismatch(_)
            | Error::EmptyInput(_)
            | Error::InvalidArgument(_)
            | Error::KeyMismatch { .. }
            | Error::BaseMismatch { .. }
            | Error::BadWeights(_)
            | Error::BadTrim(_)
            | Error::GramShapeMismatch(_)
            | Error::RecipeInvalid(_)
            | Error::RecipeParse(_) => ErrorCategory::Validation,
            Error::CorruptHeader { .. } | Error::UnsupportedDType { .. } | Error::Io { .. } => {
                ErrorCategory::Format
            }
            Error::NonFiniteInput(_)
            | Error::OverflowOnCast { .. }
            | Error::SingularGram(_)
            | Error::ZeroNormModel { .. } => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt_at_byte(offset: u64, reason: impl Into<String>) -> Self {
        Error::CorruptHeader {
            location: format!("at byte {offset}"),
            reason: reason.into(),
        }
    }

    pub(crate) fn corrupt_at_path(path: impl AsRef<str>, reason: impl Into<String>) -> Self {
        Error::CorruptHeader {
            location: format!("at {}", path.as_ref()),
            reason: reason.into(),
        }
    }
}
