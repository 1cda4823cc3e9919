use thiserror::Error;

use crate::drift_opt::OptTrace;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A policy, functional or quadrature sum produced a non-finite number.
    #[error("numeric failure at node {node:?}: {message}")]
    NumericFailure {
        node: Option<usize>,
        message: String,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The optimizer hit a non-finite objective. The trace up to that point is kept.
    #[error("optimization diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Box<OptTrace>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(node: Option<usize>, msg: impl Into<String>) -> Self {
        Error::NumericFailure {
            node,
            message: msg.into(),
        }
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
