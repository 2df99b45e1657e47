use std::io;

use thiserror::Error;

use crate::mdgraph::{DomainId, NodeId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("domain {0} has no interactions")]
    EmptyDomain(DomainId),

    #[error("dataset must contain at least one domain")]
    NoDomains,

    #[error("domain {0} does not exist")]
    UnknownDomain(DomainId),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("node {node} is missing from {context}")]
    MissingNode { node: NodeId, context: String },

    #[error("node {node} does not belong to domain {domain}")]
    NodeNotInDomain { node: NodeId, domain: DomainId },

    #[error("stop-count vectors are indexed by different anchor sets")]
    AnchorMismatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible specification: {0}")]
    Infeasible(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (domain {domain}): \
         bpr={bpr}, align={align}, reg={reg}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        domain: DomainId,
        bpr: f64,
        align: f64,
        reg: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
