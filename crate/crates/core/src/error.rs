use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector with near-zero norm at row {row}")]
    ZeroNormVector { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id {0}")]
    DuplicateSampleId(u64),

    #[error("single-camera pid {pid} appears under videos {first} and {second}")]
    CrossVideoPid { pid: u64, first: u32, second: u32 },

    #[error("pid {0} is used by both multi-camera and single-camera records")]
    PidNamespaceOverlap(u64),

    #[error("bad magic bytes in embedding file")]
    BadMagic,

    #[error("unsupported embedding file version {0}")]
    BadVersion(u32),

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("empty prediction")]
    EmptyPrediction,

    #[error("no centroid for pid {0}")]
    MissingCentroid(u64),

    #[error("pid {0} has no samples")]
    EmptyGroup(u64),

    #[error("pid {0} is not in the centroids memory")]
    UnknownPid(u64),

    #[error("not enough candidates: need {needed}, have {available}")]
    NotEnoughCandidates { needed: usize, available: usize },

    #[error("assignment infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("no query has a valid gallery match")]
    NoValidGallery,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

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

    /// Short machine-readable tag used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroNormVector { .. } => "zero_norm_vector",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse_error",
            Error::DuplicateSampleId(_) => "duplicate_sample_id",
            Error::CrossVideoPid { .. } => "cross_video_pid",
            Error::PidNamespaceOverlap(_) => "pid_namespace_overlap",
            Error::BadMagic => "bad_magic",
            Error::BadVersion(_) => "bad_version",
            Error::TruncatedFile { .. } => "truncated_file",
            Error::InfeasibleSpec(_) => "infeasible_spec",
            Error::EmptyPrediction => "empty_prediction",
            Error::MissingCentroid(_) => "missing_centroid",
            Error::EmptyGroup(_) => "empty_group",
            Error::UnknownPid(_) => "unknown_pid",
            Error::NotEnoughCandidates { .. } => "not_enough_candidates",
            Error::Infeasible(_) => "infeasible",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::NoValidGallery => "no_valid_gallery",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io { .. } => "io_error",
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
