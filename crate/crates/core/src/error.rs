use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Spatial dimensions do not satisfy a block or grid constraint.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Two operands that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called with an input it is not defined for.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric abort at step {step}: {detail}")]
    NumericAbort { step: u64, detail: String },

    #[error("jpeg codec failure ({bytes} byte stream): {detail}")]
    Codec { bytes: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NumericAbort { .. } => 3,
            _ => 1,
        }
    }
}
