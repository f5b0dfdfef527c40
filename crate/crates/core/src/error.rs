//! Crate-wide error type.

use std::path::PathBuf;

use crate::store::ClusterId;

/// Errors produced by parsing, clustering, accumulation and store I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// No stack frame could be extracted from the input.
    #[error("stacktrace contains no frames")]
    EmptyTrace,

    /// Every frame of a stacktrace was removed by the ignore rules.
    #[error("all frames were removed by ignore rules")]
    AllFramesFiltered,

    /// Malformed report file or unusable input.
    #[error("parse error: {0}")]
    Parse(String),

    /// A report's stored id does not match the fingerprint recomputed
    /// from its stacktrace.
    #[error("fingerprint mismatch: report claims {claimed}, recomputed {actual}")]
    FingerprintMismatch { claimed: String, actual: String },

    /// Threshold outside (0, 1].
    #[error("threshold must lie in (0, 1]")]
    InvalidThreshold,

    /// Cluster selection was invoked with no candidates.
    #[error("no candidate clusters to choose from")]
    NoCandidates,

    /// Two pre-existing clusters ended up in one flat cluster during
    /// hierarchical accumulation. Signals that the stored clustering was
    /// not produced by a valid threshold cut.
    #[error("old clusters {first} and {second} would merge; store is not a valid clustering")]
    OldClusterCollision { first: ClusterId, second: ClusterId },

    /// The cluster store violates its invariants.
    #[error("invalid store: {0}")]
    InvalidStore(String),

    /// Accumulation was invoked with an empty batch.
    #[error("batch contains no reports")]
    EmptyBatch,

    /// Store directory already initialized.
    #[error("store already exists at {0}")]
    AlreadyExists(PathBuf),

    /// Directory is not a cluster store.
    #[error("{0} is not a cluster store (missing or unreadable meta.json)")]
    NotAStore(PathBuf),

    /// Store was written by an incompatible version.
    #[error("store version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// The store changed on disk after the result was computed.
    #[error("store changed since the result was computed; re-run accumulation")]
    StaleResult,

    /// Another process holds the store write lock.
    #[error("store at {0} is locked by another writer")]
    StoreLocked(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
