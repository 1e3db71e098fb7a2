use thiserror::Error;

use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] DiffError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value produced by coupling layer {layer}")]
    NonFinite { layer: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("csv row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("anomaly on channel {channel} overlaps an existing anomaly at [{start}, {end})")]
    OverlappingAnomaly {
        channel: usize,
        start: usize,
        end: usize,
    },
    #[error("stateful encoder called out of order: expected t={expected}, got t={actual}")]
    OutOfOrder { expected: usize, actual: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}; last finite epoch: {last_finite:?}")]
    Diverged {
        epoch: usize,
        last_finite: Option<usize>,
    },
    #[error("model format version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("search: {0}")]
    Search(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Graph(_) => "graph",
            Error::Dimension(_) => "dimension",
            Error::NonFinite { .. } => "non-finite",
            Error::EmptyBatch => "empty-batch",
            Error::Config(_) => "config",
            Error::Csv { .. } => "csv",
            Error::Data(_) => "data",
            Error::OverlappingAnomaly { .. } => "overlapping-anomaly",
            Error::OutOfOrder { .. } => "out-of-order",
            Error::NonFiniteGradient(_) => "non-finite-gradient",
            Error::Diverged { .. } => "diverged",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::CorruptModel(_) => "corrupt-model",
            Error::Metric(_) => "metric",
            Error::Search(_) => "search",
            Error::Io(_) => "io",
        }
    }
}
