use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed geometry for zone {id}: {reason}")]
    MalformedGeometry { id: String, reason: String },

    #[error("duplicate zone id {0:?}")]
    DuplicateId(String),

    #[error("unsupported geometry type {kind} for feature {id:?}")]
    UnsupportedGeometryType { id: String, kind: String },

    #[error("coordinates look geographic (lon/lat); reproject to planar meters first")]
    GeographicCoordinates,

    #[error("duplicate panel key {0}")]
    DuplicateKey(String),

    #[error("negative count {count} at line {line}")]
    NegativeCount { line: usize, count: i64 },

    #[error("unknown {field} label {value:?} at line {line}")]
    UnknownLabel {
        field: &'static str,
        value: String,
        line: usize,
    },

    #[error("GPS stream for device {device} is not time-sorted at index {index}")]
    UnsortedStream { device: String, index: usize },

    #[error("zone {0:?} has no census record")]
    MissingZone(String),

    #[error("values have zero variance")]
    DegenerateVariance,

    #[error("spatial weights have no positive entries")]
    EmptyWeights,

    #[error("column {0} is constant")]
    DegenerateColumn(usize),

    #[error("k = {k} exceeds the number of rows ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("Calinski-Harabasz score undefined: {0}")]
    UndefinedScore(&'static str),

    #[error("missing covariate {covariate} for zone {zone:?}")]
    MissingCovariate {
        covariate: &'static str,
        zone: String,
    },

    #[error("working population of zone {0:?} is not positive")]
    NonPositiveWorkingPop(String),

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("clustered covariance needs at least two clusters")]
    SingleCluster,

    #[error("no baseline for {0}")]
    UndefinedBaseline(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

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

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
