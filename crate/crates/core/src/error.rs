use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: Shape,
    },
    #[error("{op}: {groups} groups do not divide {channels} channels")]
    Groups {
        op: &'static str,
        groups: usize,
        channels: usize,
    },
    #[error("{op}: zero-size spatial extent")]
    EmptySpatial { op: &'static str },
    #[error("{op}: invalid argument: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Shape),
    #[error("tape already consumed by a backward pass; record a new forward first")]
    TapeConsumed,
    #[error("tape is empty")]
    EmptyTape,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        op,
        reason: reason.into(),
    }
}
