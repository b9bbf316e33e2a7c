use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MomeError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MomeError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MomeError::Invalid(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MomeError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        MomeError::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MomeError>;
