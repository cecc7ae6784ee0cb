use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("absolute-continuity violated at row {row}, column {col}")]
    AbsoluteContinuity { row: usize, col: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Precondition(String),

    #[error("zero projection: encoder output has zero norm")]
    ZeroProjection,

    #[error("singular normal equations; use ridge_lambda > 0")]
    Singular,

    #[error("prototype separation unsatisfiable after {draws} rejection draws; increase image_side or caption_dim")]
    Separation { draws: usize },

    #[error("crop {crop:?} out of bounds for {side}x{side} image")]
    CropOutOfBounds { crop: [u32; 4], side: usize },

    #[error("not a shard: {0}")]
    NotAShard(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("corrupt shard: {0}")]
    Corrupt(String),

    #[error("truncated at byte offset {offset}")]
    Truncated { offset: u64 },

    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },

    #[error("manifest conflict: differing fields [{}]", .0.join(", "))]
    ManifestConflict(Vec<String>),

    #[error("fingerprint mismatch for {what}: expected {expected:016x}, found {found:016x}")]
    Fingerprint {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("reinforcements required for distillation")]
    ReinforcementsRequired,

    #[error("worker crashed (injected) while holding shard {shard}")]
    InjectedCrash { shard: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
