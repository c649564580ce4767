//! Error type shared across the crate.

use crate::tree::NodeId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("unknown leaf index {0}")]
    UnknownLeaf(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("degenerate edge into node {0:?}: duration must be positive")]
    DegenerateEdge(NodeId),
    #[error("missing location at node {0:?}")]
    MissingLocation(NodeId),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
