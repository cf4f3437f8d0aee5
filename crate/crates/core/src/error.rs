use std::io;

use thiserror::Error;

/// Errors produced by the dataset, model, scheduling, solver and transport layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: feature indices are not strictly ascending")]
    NonAscendingIndices { line: usize },

    #[error("line {line}: duplicate feature index {index}")]
    DuplicateIndex { line: usize, index: u32 },

    #[error("line {line}: non-finite feature value")]
    NonFinite { line: usize },

    #[error("dataset contains no samples")]
    EmptyDataset,

    #[error("bad model header")]
    BadHeader,

    #[error("model stream truncated")]
    Truncated,

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state is not synchronized: sum of class vectors has norm {residual:e}")]
    Unsynced { residual: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("peer {peer} disconnected: {msg}")]
    PeerDisconnected { peer: usize, msg: String },

    #[error("handshake rejected: {0}")]
    Handshake(String),
}

pub type Result<T> = std::result::Result<T, Error>;
