//! Crate-wide error type and result alias.

/// Errors produced by any stage of the pipeline.
///
/// Variants are grouped by how the CLI reports them: configuration problems
/// exit with code 2, data problems with 3, numerical failures (NaN/Inf
/// detected at a stage boundary) with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid stats: {0}")]
    InvalidStats(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("missing NMS distance threshold for class {0}")]
    MissingClassThreshold(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite values detected after stage `{0}`")]
    NonFinite(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach the name of the pipeline stage that produced the error.
    pub fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidGrid(_) | Error::MissingClassThreshold(_) => 2,
            Error::NonFinite(_) => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(
    context: impl Into<String>,
    expected: impl Into<String>,
    actual: impl Into<String>,
) -> Error {
    Error::ShapeMismatch {
        context: context.into(),
        expected: expected.into(),
        actual: actual.into(),
    }
}
