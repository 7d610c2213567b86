use thiserror::Error;

use crate::fedsim::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Layer shapes, batch widths, or vector lengths do not line up.
    #[error("structural error: {0}")]
    Shape(String),

    #[error("non-finite {what} in layer {layer}")]
    NonFinite { layer: usize, what: &'static str },

    /// Learning constants violate a condition of the convergence bound.
    #[error("infeasible learning parameters: {condition}")]
    Infeasible { condition: String },

    /// The global loss became non-finite; the record holds every round up to the failure.
    #[error("federated run diverged at round {round}")]
    Diverged { round: usize, record: Box<RunRecord> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn infeasible(condition: impl Into<String>) -> Self {
        Error::Infeasible {
            condition: condition.into(),
        }
    }
}
