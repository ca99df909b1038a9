use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("shapes cannot fit: {0}")]
    CannotFit(String),
    #[error("label {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: usize, num_classes: usize },
    #[error("class target {value} is not 0 or 1")]
    InvalidClassTarget { value: f64 },
    #[error("non-finite loss term {term}: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;
