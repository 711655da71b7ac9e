use thiserror::Error;

/// Errors raised anywhere in the pruning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} is entirely masked")]
    MaskedRow { row: usize },

    #[error("empty region: {0}")]
    EmptyRegion(&'static str),

    #[error("degenerate mask: no retained tokens")]
    DegenerateMask,

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
