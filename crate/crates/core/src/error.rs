use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "distance-transform grid needs {voxels} voxels, over the budget of {budget}; \
         try a spacing of at least {suggested_spacing:.4} m"
    )]
    GridTooLarge {
        voxels: u64,
        budget: u64,
        suggested_spacing: f64,
    },

    #[error(
        "kernel matrix would have {entries} entries, over the budget of {budget}; \
         use a coarser support grid"
    )]
    KernelTooLarge { entries: u64, budget: u64 },

    #[error("normal equations are singular; use a ridge coefficient delta > 0")]
    Singular,

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        trace: Box<crate::optimize::OptimTrace>,
    },

    #[error("{path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }
}
