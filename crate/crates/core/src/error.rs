use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Training stage names, used to locate aborts and to key timing samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    ComputeGradients,
    SendGradients,
    ReceiveGradients,
    ModelUpdate,
    ConvergenceDetection,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::ComputeGradients,
        Stage::SendGradients,
        Stage::ReceiveGradients,
        Stage::ModelUpdate,
        Stage::ConvergenceDetection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::ComputeGradients => "compute_gradients",
            Stage::SendGradients => "send_gradients",
            Stage::ReceiveGradients => "receive_gradients",
            Stage::ModelUpdate => "model_update",
            Stage::ConvergenceDetection => "convergence_detection",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stale gradient: {0}")]
    Staleness(String),

    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },

    #[error("object not found: {0}")]
    NotFound(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("fan-out failed for batches {failed:?}: {reason}")]
    Fanout { failed: Vec<usize>, reason: String },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("division error: {0}")]
    Division(String),

    #[error("instrumentation error: {0}")]
    Instrumentation(String),

    #[error("peer {rank} aborted at epoch {epoch} during {stage}: {source}")]
    Aborted {
        rank: usize,
        epoch: usize,
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
