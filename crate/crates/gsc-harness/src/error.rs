//! Error type shared by all harness modules.

use thiserror::Error;

/// Anything that can go wrong while driving an experiment.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Underlying filesystem failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A checkpoint file is malformed; `offset` is the byte position at
    /// which decoding gave up.
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A configuration file could not be parsed or validated; `line` is
    /// 1-based, or 0 when the problem is not tied to a single line.
    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    /// A pipeline stage was invoked before the stage that produces its
    /// inputs.
    #[error("missing checkpoint for stage `{stage}`; run it first")]
    MissingStage { stage: String },

    /// Precondition violation outside config/checkpoint parsing.
    #[error("{0}")]
    Invalid(String),

    /// Error bubbled up from the core library.
    #[error(transparent)]
    Core(#[from] gsc_core::GscError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
