use thiserror::Error;

use crate::data::DataError;
use crate::nets::NetError;
use crate::tensor::TensorError;

/// Errors raised above the tensor layer: objective composition, training,
/// evaluation and reporting.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    /// The requested variant, supervision mode or hyperparameters contradict
    /// each other or the supplied data.
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss term or update became NaN or infinite.
    #[error("numerical abort at step {step}: term '{term}' is {value}")]
    Numerical { step: u64, term: String, value: f64 },
    /// An update phase changed a network it does not own.
    #[error("phase {phase} changed parameters of {net}, which it does not own")]
    Isolation { phase: String, net: String },
    #[error("run {variant} seed {seed} failed: {source}")]
    Run {
        variant: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True when the root cause is a non-finite loss rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. } => true,
            Error::Run { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
