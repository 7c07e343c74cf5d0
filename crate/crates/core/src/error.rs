use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("point cloud has no vertices")]
    EmptyCloud,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("degenerate variance: sigma2 = {sigma2:e}")]
    DegenerateSigma { sigma2: f64 },

    #[error("singular solve: {0}")]
    SingularSolve(&'static str),

    #[error("non-finite value in input matrix")]
    NonFinite,

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("too few points: level would keep {kept} components (minimum {minimum})")]
    TooFewPoints { kept: usize, minimum: usize },

    #[error("attack `{0}` requires face connectivity")]
    MissingFaces(&'static str),

    #[error("intensity {value} out of range for {kind}: {expected}")]
    IntensityOutOfRange {
        kind: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("attack spec list is empty")]
    EmptySpecs,

    #[error("calibration needs at least one positive and one negative sample")]
    OneClassOnly,

    #[error("report carries no measure usable for classification")]
    NoMeasures,

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("invalid parameter `{key}`: {message}")]
    InvalidParam { key: String, message: String },

    #[error("measure `{measure}` skipped: {reason}")]
    MeasureSkipped {
        measure: &'static str,
        reason: String,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidParam {
            key: key.into(),
            message: message.into(),
        }
    }
}
