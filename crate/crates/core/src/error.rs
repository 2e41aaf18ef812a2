use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value produced during {0}")]
    NonFinite(&'static str),

    #[error("not enough updates: {rule} needs at least {required}, got {actual}")]
    TooFewUpdates {
        rule: &'static str,
        required: usize,
        actual: usize,
    },

    #[error("auxiliary dataset is empty; the defense cannot run")]
    EmptyAuxiliary,

    #[error("defense selected no clients")]
    EmptySelection,

    #[error("round {round} aborted: {source}")]
    RoundAborted {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("weibull fit did not converge")]
    FitNotConverged,

    #[error("csv row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
