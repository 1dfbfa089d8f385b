use thiserror::Error;

/// Errors raised by the pure numerical operations (ranks, advantages,
/// objectives).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid rank permutation {ranks:?}: {reason}")]
    InvalidPermutation { ranks: Vec<usize>, reason: String },

    #[error("empty group")]
    EmptyGroup,

    #[error("degenerate group of size {0}: at least two responses are required")]
    DegenerateGroup(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
