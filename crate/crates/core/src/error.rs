use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("waveform too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },
    #[error("cannot fit a standardizer on fewer than 2 frames")]
    EmptyCorpus,
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unknown label '{0}'")]
    UnknownLabel(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch norm '{0}' has no running statistics yet")]
    NoRunningStats(String),
    #[error("backward requires a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),
    #[error("training split is empty")]
    EmptyDataset,
    #[error("cross-validation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("median window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("aggregation over zero classes")]
    NoClasses,
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("template duration {0} s outside [0.2, 3] s")]
    InvalidDuration(f64),
    #[error("could not place events for recording {0} within the polyphony bound")]
    PlacementFailure(String),
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ConfigMismatch(_) => 2,
            Error::MissingInput(_) => 3,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }

    /// Short stable identifier for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IoError",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::InvalidConfig(_) => "ConfigError",
            Error::TooShort { .. } => "TooShort",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::Parse { .. } => "ParseError",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NoRunningStats(_) => "NoRunningStats",
            Error::NotScalar(_) => "NotScalar",
            Error::NonFinite(_) => "NumericFailure",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::CorruptFile(_) => "CorruptFile",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::EmptyBatch => "EmptyBatch",
            Error::MissingGradient(_) => "MissingGradient",
            Error::EmptyDataset => "EmptyDataset",
            Error::TooFewFolds(_) => "TooFewFolds",
            Error::EvenWindow(_) => "EvenWindow",
            Error::NoClasses => "NoClasses",
            Error::EmptyValidation => "EmptyValidation",
            Error::InvalidDuration(_) => "InvalidDuration",
            Error::PlacementFailure(_) => "PlacementFailure",
            Error::MissingInput(_) => "MissingInput",
        }
    }
}
