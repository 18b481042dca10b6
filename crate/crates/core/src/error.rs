use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure category, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags or manifest contents.
    Config,
    /// Unreadable or inconsistent data files.
    Data,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed npy file: {msg}")]
    Npy { path: PathBuf, msg: String },
    #[error("{what}: non-finite value at flat index {index}")]
    NonFinite { what: String, index: usize },
    #[error("{what}: {msg}")]
    Shape { what: String, msg: String },
    #[error("dims mismatch for {id}: expected {expected}, found {found}")]
    DimsMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("zero norm descriptor for {id}")]
    ZeroNorm { id: String },
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("unknown class id {class_id} at flat index {index} (schema has {num_classes} classes, undefined id {undefined_id})")]
    UnknownClassId {
        class_id: u8,
        index: usize,
        num_classes: usize,
        undefined_id: u8,
    },
    #[error("empty reference split")]
    EmptyReferenceSet,
    #[error("no eligible references for query {query}: every reference is geo-excluded")]
    NoEligibleReferences { query: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("manifest: duplicate id {0:?}")]
    DuplicateId(String),
    #[error("manifest: road class {0:?} not in class schema")]
    MissingRoadClass(String),
    #[error("manifest: dangling path {0}")]
    DanglingPath(PathBuf),
    #[error("missing ground truth labels for {0}")]
    MissingLabels(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Manifest(_)
            | Error::DuplicateId(_)
            | Error::MissingRoadClass(_)
            | Error::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
