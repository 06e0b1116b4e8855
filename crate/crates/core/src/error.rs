use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed container: {0}")]
    Format(String),

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("corpus contains no documents")]
    EmptyCorpus,

    #[error("every calibration position has a degenerate (near-zero) activation for layer {layer}")]
    DegenerateActivations { layer: usize },

    #[error("degenerate budget: m_higher ({0}) equals m_lower")]
    DegenerateBudget(u64),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
