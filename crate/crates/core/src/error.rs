// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Every failure the toolkit reports.
#[derive(Debug, Error)]
pub enum Error {
    /// A softmax row had every entry masked.
    #[error("empty support: every entry of the softmax row is masked")]
    EmptySupport,

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid vocab: {0}")]
    Vocab(String),

    #[error("cannot tokenize character {ch:?} at byte {offset}")]
    Untokenizable { ch: char, offset: usize },

    #[error("token id {token} out of range for vocab of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid component: {0}")]
    InvalidComponent(String),

    #[error("invalid intervention: {0}")]
    InvalidHook(String),

    #[error("duplicate component {0}")]
    DuplicateComponent(String),

    #[error("invalid token spans: {0}")]
    Spans(String),

    #[error("dataset rejected: {}", .0.join("; "))]
    Dataset(Vec<String>),

    #[error("fixture does not fit: {0}")]
    DimsTooSmall(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short machine-readable tag used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptySupport => "empty_support",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
            Error::Vocab(_) => "vocab",
            Error::Untokenizable { .. } => "untokenizable",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::EmptySequence => "empty_sequence",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::InvalidComponent(_) => "invalid_component",
            Error::InvalidHook(_) => "invalid_hook",
            Error::DuplicateComponent(_) => "duplicate_component",
            Error::Spans(_) => "spans",
            Error::Dataset(_) => "dataset",
            Error::DimsTooSmall(_) => "dims_too_small",
            Error::Invalid(_) => "invalid",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
