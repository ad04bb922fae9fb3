use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort { step: u64, detail: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
