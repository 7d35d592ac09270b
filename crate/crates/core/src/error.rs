use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while validating models, traces, and configs, or while
/// running a simulation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid model `{model}`: {reason}")]
    InvalidModel { model: String, reason: String },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid cursor {cursor} for model `{model}`")]
    InvalidCursor { model: String, cursor: String },

    #[error("decoder length {len} out of range 1..={max} for model `{model}`")]
    DecoderLength { model: String, len: u32, max: u32 },

    #[error("batch size must be at least 1")]
    ZeroBatch,

    #[error("invalid calibration: {0}")]
    Calibration(String),

    #[error("invalid length distribution: {0}")]
    LengthDistribution(String),

    #[error("invalid traffic config: {0}")]
    Traffic(String),

    #[error("trace line {line}: {reason}")]
    TraceRow { line: usize, reason: String },

    #[error("invalid policy config: {0}")]
    Policy(String),

    #[error("request {0} is already in flight")]
    DuplicateRequest(u64),

    #[error("request {0} is not in flight")]
    UnknownRequest(u64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("simulation invariant violated: {0}")]
    Invariant(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<SimError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        SimError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the error reports a broken internal invariant rather than bad
    /// user input.
    pub fn is_invariant(&self) -> bool {
        match self {
            SimError::Invariant(_) => true,
            SimError::Context { source, .. } => source.is_invariant(),
            _ => false,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
