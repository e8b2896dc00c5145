use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feature {index}: {message}")]
    Geometry { index: usize, message: String },

    #[error("duplicate tile id {0}")]
    DuplicateTile(u64),

    #[error("degenerate polygon: {0} distinct vertices")]
    DegeneratePolygon(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("raster: {0}")]
    Raster(String),

    #[error("interpolation: {0}")]
    Interpolation(String),

    #[error("tile set mismatch: {0}")]
    TileMismatch(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training: {0}")]
    Training(String),

    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },

    #[error("explain: {0}")]
    Explain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from malformed configuration or arguments
    /// rather than from the data being processed.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Invalid(_))
    }
}
