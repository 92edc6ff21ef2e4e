use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("case {case}: missing {modality} file {}", path.display())]
    MissingModality { case: String, modality: &'static str, path: PathBuf },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid label value {value} at voxel {index:?} (allowed: 0, 1, 2, 4)")]
    InvalidLabel { value: i64, index: [usize; 3] },

    #[error("volume contains no nonzero voxel")]
    EmptyVolume,

    #[error("modality {0} has constant foreground intensity")]
    DegenerateIntensity(&'static str),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite loss at batch {batch}")]
    NumericalDivergence { batch: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("NIfTI {}: {message}", path.display())]
    Nifti { path: PathBuf, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Error::Shape(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
