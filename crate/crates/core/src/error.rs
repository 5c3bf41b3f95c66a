use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("similarity out of range: c[{row}][{col}] = {value}")]
    SimilarityOutOfRange { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("result missing branch bookkeeping")]
    MissingBookkeeping,
    #[error("unlabeled video")]
    UnlabeledVideo,
    #[error("degenerate background")]
    DegenerateBackground,
    #[error("non-positive-length interval [{0}, {1})")]
    EmptyInterval(f64, f64),
    #[error("empty segment")]
    EmptySegment,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("T = {t} too small to fit requested instances (need {needed})")]
    VideoTooShort { t: usize, needed: usize },
    #[error("not a feature file")]
    NotAFeatureFile,
    #[error("not a checkpoint file")]
    NotACheckpoint,
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}
