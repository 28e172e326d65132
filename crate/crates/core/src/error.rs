//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not agree; `node` identifies the graph node when the
    /// mismatch occurred inside a computation graph.
    #[error("shape mismatch at node {node}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        node: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A tensor value or intermediate result is NaN or infinite.
    #[error("non-finite value in {context} (node {node})")]
    NonFinite { context: String, node: usize },

    /// An argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The requested graph operation cannot run in the current graph state.
    #[error("graph error: {0}")]
    Graph(String),

    /// A metric is undefined on the given input (degenerate mask, all-zero
    /// attribution, ...). Callers typically log and skip the sample.
    #[error("metric undefined: {0}")]
    Undefined(String),

    /// A required context item (training set, model, counterfactual) was not
    /// supplied.
    #[error("missing context: {0}")]
    MissingContext(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted artifact (tensor container, checkpoint, dataset) is
    /// malformed.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
