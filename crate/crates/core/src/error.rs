use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation encoding")]
    DegenerateRotation,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("{msg} at line {line}")]
    Parse { line: usize, msg: String },
    #[error("object out of view")]
    ObjectOutOfView,
    #[error("underdetermined: {0} correspondences, need at least 6")]
    Underdetermined(usize),
    #[error("degenerate geometry")]
    DegenerateGeometry,
    #[error("RANSAC failure: no model with at least 6 inliers")]
    RansacFailure,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("invalid flow file: {0}")]
    InvalidFlowFile(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
