use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: vector has zero norm")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate id {0} in batch")]
    DuplicateId(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid world spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown record {id} in modality {modality}")]
    UnknownRecord { modality: usize, id: usize },

    #[error("record {id} in modality {modality} belongs to an already annotated tuple")]
    AlreadyAnnotated { modality: usize, id: usize },

    #[error("too few pairs to train: {0} (need at least 2)")]
    TooFewPairs(usize),

    #[error("round {round}: record {id} of modality {modality} is not in the candidate set")]
    OutsideCandidates {
        round: usize,
        modality: usize,
        id: usize,
    },

    #[error("refusing to read oracle file {0} from acquisition code")]
    OracleAccess(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

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
