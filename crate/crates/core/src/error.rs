use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("diverged state at t = {t}")]
    DivergedState { t: f64 },

    #[error("state has {got} components, system expects {expected}")]
    StateDimension { expected: usize, got: usize },

    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("series of length {len} is shorter than window {window}")]
    SeriesTooShort { len: usize, window: usize },

    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },

    #[error("insufficient {class} rows: available {available}, requested {requested}")]
    InsufficientRows {
        class: &'static str,
        available: usize,
        requested: usize,
    },

    #[error("window underflows trajectory start: t_tip {t_tip}, lead {lead}, window {window}")]
    WindowUnderflow { t_tip: usize, lead: usize, window: usize },

    #[error("empty sample")]
    EmptySample,

    #[error("training set contains a single class")]
    SingleClass,

    #[error("no dataset for {0}")]
    MissingDataset(String),

    #[error("malformed metadata in {path}: {msg}")]
    MalformedMeta { path: PathBuf, msg: String },

    #[error("truncated data in {path}: expected {expected} bytes, found {found}")]
    TruncatedData {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("dimension mismatch in {path}: metadata implies {expected} bytes, file has {found}")]
    DimensionMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Stable snake-case name of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DivergedState { .. } => "diverged_state",
            Error::StateDimension { .. } => "state_dimension",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::SeriesTooShort { .. } => "series_too_short",
            Error::TooFewRows { .. } => "too_few_rows",
            Error::InsufficientRows { .. } => "insufficient_rows",
            Error::WindowUnderflow { .. } => "window_underflow",
            Error::EmptySample => "empty_sample",
            Error::SingleClass => "single_class",
            Error::MissingDataset(_) => "missing_dataset",
            Error::MalformedMeta { .. } => "malformed_meta",
            Error::TruncatedData { .. } => "truncated_data",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
