use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dim { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient check aborted: {0}")]
    GradCheck(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGrad(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    /// True for errors caused by numeric blow-up rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFiniteGrad(_))
    }
}
