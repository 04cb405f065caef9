use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank deficiency in {context}: numerical rank {rank}, required {required}")]
    RankDeficient {
        context: String,
        rank: usize,
        required: usize,
    },

    #[error("insufficient data richness for mode(s) {modes:?}; collect a longer trajectory or use richer inputs")]
    ModeRichness { modes: Vec<usize> },

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("simulation diverged at step {step} (|x| > {limit:e})")]
    Divergence { step: usize, limit: f64 },

    #[error("error bound unavailable (c_bar = {c_bar:.4} >= 1); pre-condition the data matrix to tighten the bound")]
    BoundUnavailable { c_bar: f64 },

    #[error("malformed problem: {0}")]
    MalformedProblem(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
