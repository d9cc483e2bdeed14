use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },

    #[error("duplicate patient id `{0}`")]
    DuplicatePatient(String),

    #[error("dangling file reference `{path}` (patient `{patient}`)")]
    DanglingReference { patient: String, path: PathBuf },

    #[error("unknown patient id `{0}`")]
    UnknownPatient(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("input size {size} not divisible by {divisor}")]
    Indivisible { size: usize, divisor: usize },

    #[error("input size {0} is inadmissible for valid-mode U-Net")]
    Inadmissible(usize),

    #[error("parameter `{0}` not found")]
    MissingParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("strict load mismatch on `{name}`: {message}")]
    StrictMismatch { name: String, message: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("missing cache: {0}")]
    MissingCache(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), message: message.into() }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedManifest { .. } => "malformed_manifest",
            Error::DuplicatePatient(_) => "duplicate_patient",
            Error::DanglingReference { .. } => "dangling_reference",
            Error::UnknownPatient(_) => "unknown_patient",
            Error::Decode { .. } => "decode",
            Error::Encode { .. } => "encode",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidConfig { .. } => "invalid_config",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::Indivisible { .. } => "indivisible",
            Error::Inadmissible(_) => "inadmissible",
            Error::MissingParameter(_) => "missing_parameter",
            Error::DuplicateParameter(_) => "duplicate_parameter",
            Error::CorruptArchive(_) => "corrupt_archive",
            Error::StrictMismatch { .. } => "strict_mismatch",
            Error::OutOfRange(_) => "out_of_range",
            Error::MissingCache(_) => "missing_cache",
        }
    }
}
