use thiserror::Error;

/// Invalid configuration or a violated call precondition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
}

/// A model response that does not have the expected structure. Callers usually retry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("response has no `{0}` section")]
    MissingSection(String),
    #[error("`{0}` section is empty")]
    EmptySection(String),
    #[error("expected {expected} items, found {found}")]
    TooFewItems { expected: usize, found: usize },
    #[error("label `{0}` is not in the label set")]
    UnknownLabel(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}
