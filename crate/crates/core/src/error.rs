use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lifetime error: {0}")]
    Lifetime(String),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("enumeration cap exceeded: C({n},{k}) = {count} > {cap}")]
    CapExceeded { n: usize, k: usize, count: f64, cap: u64 },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
