// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Every failure the storage stack can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("block {index} is out of range for a device of {total} blocks")]
    OutOfRange { index: u64, total: u64 },

    #[error("buffer of {got} bytes does not match block size {expected}")]
    BadLength { expected: usize, got: usize },

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("trace already active: {0}")]
    TraceActive(String),

    #[error("no trace is active")]
    NoTrace,

    #[error("snapshots describe different devices")]
    SnapshotMismatch,

    #[error("authentication failed")]
    Auth,

    #[error("corrupt device: {0}")]
    Corrupt(String),

    #[error("free-block matrix is empty")]
    NoFreeBlocks,

    #[error("stale selection receipt for slot {0}")]
    StaleReceipt(usize),

    #[error("stash overflow: capacity {capacity} reached")]
    StashOverflow { capacity: usize },

    #[error("logical id {id} exceeds capacity {capacity}")]
    IdOutOfRange { id: u64, capacity: u64 },

    #[error("public volume is full")]
    PublicFull,

    #[error("no hidden volume is mounted")]
    NoHiddenVolume,

    #[error("id {0} has never been written")]
    Unwritten(u64),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("illegal access pattern pair: {0}")]
    IllegalPattern(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
