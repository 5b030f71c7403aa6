//! Streamline files, dataset manifests and shape tables.

mod manifest;
mod table;
mod tck;

pub use manifest::{read_manifest, write_manifest, ClusterEntry, DatasetManifest, SubjectEntry};
pub use table::{format_sig6, read_shape_csv, write_shape_csv, ShapeRow, SHAPE_CSV_HEADER};
pub use tck::{read_tck, write_tck};

use crate::geometry::GeometryError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TractIoError {
    #[error("{path}: first line must begin with \"mrtrix tracks\"")]
    MissingMagic { path: PathBuf },
    #[error("{path}: unsupported datatype '{datatype}', only Float32LE is read")]
    UnsupportedDatatype { path: PathBuf, datatype: String },
    #[error("{path}: payload ended before the Inf terminator")]
    TruncatedPayload { path: PathBuf },
    #[error("{path}: file holds zero streamlines")]
    EmptyFile { path: PathBuf },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: streamline {index}: {source}")]
    InvalidStreamline {
        path: PathBuf,
        index: usize,
        source: GeometryError,
    },
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{}: field '{field}': {message}", line.map(|l| l.to_string()).unwrap_or_else(|| "-".into()))]
    SchemaError {
        path: PathBuf,
        line: Option<usize>,
        field: String,
        message: String,
    },
    #[error("{path}: referenced file does not exist")]
    MissingFile { path: PathBuf },
}

impl TractIoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TractIoError::IoFailure {
            path: path.into(),
            source,
        }
    }
}
