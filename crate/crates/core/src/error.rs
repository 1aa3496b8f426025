use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input not found: {0}")]
    MissingInput(PathBuf),

    #[error("ambiguous input: {0}")]
    Ambiguous(String),

    #[error("missing DICOM attribute {tag} in {path}")]
    MissingTag { tag: &'static str, path: PathBuf },

    #[error("invalid DICOM data in {path}: {reason}")]
    InvalidDicom { path: PathBuf, reason: String },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("annotations reference SOP instance UIDs absent from the volume: {}", .0.join(", "))]
    OrphanAnnotations(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input out of range: {0}")]
    OutOfRange(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error(
        "non-finite loss at session {session} epoch {epoch} batch {batch} (lr = {lr:e})"
    )]
    NonFiniteLoss {
        session: usize,
        epoch: usize,
        batch: usize,
        lr: f64,
    },

    /// Training stopped on request after a completed epoch; state was
    /// saved for resuming.
    #[error("training interrupted after session {session} epoch {epoch}")]
    Interrupted { session: usize, epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("NIfTI error in {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by the command-line driver to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad or inconsistent input data.
    Data,
    /// Failure while computing (training divergence, I/O on outputs, ...).
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingInput(_)
            | Error::Ambiguous(_)
            | Error::MissingTag { .. }
            | Error::InvalidDicom { .. }
            | Error::Annotation(_)
            | Error::OrphanAnnotations(_)
            | Error::Shape(_)
            | Error::OutOfRange(_)
            | Error::Weights(_)
            | Error::Config(_)
            | Error::Nifti { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidArgument(_) => ErrorClass::Data,
            Error::NonFiniteLoss { .. } | Error::Interrupted { .. } | Error::Image(_) | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
