use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can surface.
///
/// The variants are grouped so the CLI can map them onto process exit codes
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    /// A stage or operation is missing an upstream artifact.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Input data violates a catalog or split invariant.
    #[error("data error: {0}")]
    Data(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("image error for item {item_id}: {message}")]
    Image { item_id: String, message: String },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// 0 success, 2 config, 3 dependency, 4 backend/transport, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) => 2,
            Error::Dependency(_) => 3,
            Error::Transport(_) | Error::Capability(_) => 4,
            _ => 1,
        }
    }
}
