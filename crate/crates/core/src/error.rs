//! Error types shared across the crate.
//!
//! Each variant corresponds to one failure family named by the module
//! contracts (dimension errors carry both shapes, ingestion errors carry
//! line numbers, and so on). Everything funnels into the single [`Error`]
//! enum so the CLI can print the originating message verbatim.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("sequence length error: {0}")]
    Length(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("control error: {0}")]
    Control(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parameter parity error: {0}")]
    Parity(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("recommender error: {0}")]
    Recommender(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
