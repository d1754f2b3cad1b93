use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-numeric cell {value:?} at row {row}, column {column:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("non-finite value at row {row}, column {column:?}")]
    NonFiniteValue { row: usize, column: String },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("feature index {index} out of range for {p} features")]
    FeatureOutOfRange { index: usize, p: usize },
    #[error("labels contain a single class; at least two are required")]
    SingleClass,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("model expects {expected} features, dataset has {found}")]
    ColumnCountMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unknown feature {0:?} in knowledge graph")]
    UnknownFeature(String),
    #[error("operation not supported: {0}")]
    Unsupported(String),
    #[error("external model protocol error: {0}")]
    Protocol(String),
    #[error("external model timed out during {0}")]
    Timeout(&'static str),
    #[error("no counterfactual paths were found; importance is undefined")]
    NoCounterfactuals,
    #[error("power iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("iteration {index}: {source}")]
    Iteration {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage and iteration wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Iteration { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
