use alloc::string::String;

use crate::tensor::Shape;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} would produce an empty output from input {input}")]
    EmptyOutput { op: &'static str, input: Shape },
    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("input of {h}x{w} is not divisible by {divisor}; resize the image so both sides are multiples of {divisor}")]
    Divisibility { h: usize, w: usize, divisor: usize },
    #[error("loss node must be a 1x1x1x1 scalar, got {0}")]
    NonScalarLoss(Shape),
    #[error("backward called before a forward pass reached node {0}")]
    BackwardBeforeForward(usize),
    #[error("graph input `{0}` was never set")]
    MissingInput(String),
    #[error("unknown name `{0}`")]
    UnknownName(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
