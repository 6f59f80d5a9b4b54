//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GscError>;

#[derive(Debug, Error)]
pub enum GscError {
    /// Two operands (or an operand and a layer) disagree on shape.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or Inf.
    #[error("{op}: non-finite value in result")]
    NonFinite { op: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward: loss must be a scalar, got {elems} elements")]
    NotScalarLoss { elems: usize },

    /// `backward` was called twice over the same recorded graph.
    #[error("backward: tape already consumed")]
    TapeConsumed,

    /// A precondition on an argument was violated.
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    /// Tokenizer hit a word outside the closed vocabulary.
    #[error("tokenize: unknown word {word:?}")]
    UnknownWord { word: String },

    /// A training loop left the stable regime.
    #[error("{stage}: training diverged, loss = {loss}")]
    Divergence { stage: String, loss: f64 },

    /// The optimizer received a non-finite gradient.
    #[error("adam_step: non-finite gradient for parameter {param:?}")]
    NanGradient { param: String },

    /// Channel covariance could not be factored even after the eigenvalue floor.
    #[error("sample_channel: covariance not positive semi-definite beyond repair")]
    CovarianceNotPsd,
}

impl GscError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        GscError::InvalidArg {
            op,
            msg: msg.into(),
        }
    }
}
