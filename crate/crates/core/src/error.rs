//! Error taxonomy shared by the whole crate.
//!
//! The CLI maps these variants onto distinct process exit codes, so keep the
//! categories coarse: what failed, not where.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/layer shape disagreement.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An operation contract was violated (bad argument, wrong call order).
    #[error("contract error: {0}")]
    Contract(String),

    /// Tape or trainer state misuse (e.g. backward called twice).
    #[error("state error: {0}")]
    State(String),

    /// A documented operation produced NaN/Inf from finite inputs.
    #[error("numerical error: {0}")]
    NonFinite(String),

    /// Degenerate geometry (collinear points, zero-area triangle, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Corpus/data problems (missing samples, malformed landmark files).
    #[error("data error: {0}")]
    Data(String),

    /// Configuration file or run-configuration problems.
    #[error("configuration error: {0}")]
    Config(String),

    /// Stage ordering violation in the curriculum.
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// Training diverged or failed to reach a required quality bar.
    #[error("training failure: {0}")]
    Training(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI. 0 is success; each failure class gets a
    /// stable nonzero code (documented in the README).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim(_) | Error::Contract(_) | Error::Config(_) => 2,
            Error::NonFinite(_) | Error::Training(_) => 3,
            Error::Data(_) | Error::Geometry(_) => 4,
            Error::Sequencing(_) | Error::State(_) => 5,
            Error::Io(_) | Error::Image(_) => 6,
        }
    }
}
