//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("cholesky factorization failed; attempted diagonal jitter ladder {ladder:?}")]
    Factorization { ladder: Vec<f64> },

    #[error("feature bank is empty; run a labeled phase (or rebuild_bank) first")]
    EmptyBank,

    #[error(
        "requested {requested} nearest neighbors but the bank holds only {available} entries; \
         lower n_neighbors or raise bank_max_entries"
    )]
    NotEnoughNeighbors { requested: usize, available: usize },

    #[error("non-finite loss at step {step} (batch: {batch_id})")]
    NonFiniteLoss { step: usize, batch_id: String },

    #[error("autodiff tape error: {0}")]
    Tape(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("bank dump mode is {dump_mode} but {requested} was requested")]
    BankModeMismatch { dump_mode: String, requested: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {source}", .path.display())]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingFile(_) => 2,
            _ => 1,
        }
    }
}
