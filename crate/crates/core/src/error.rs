use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot parse file name `{name}`: {reason}")]
    FileName { name: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("domain `{0}` has no representations")]
    EmptyDomain(String),
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("non-finite objective when probing coordinate {coordinate} ({name})")]
    NonFiniteProbe { coordinate: usize, name: String },
    #[error("spec error: {0}")]
    Spec(String),
}

pub type Result<T> = core::result::Result<T, Error>;
