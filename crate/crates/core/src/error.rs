use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlusError {
    #[error(transparent)]
    Tensor(#[from] plus_autodiff::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, PlusError>;

impl PlusError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        PlusError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        PlusError::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            PlusError::Config(_) => 2,
            PlusError::Numeric(_) => 4,
            PlusError::Tensor(plus_autodiff::Error::Numeric { .. }) => 4,
            _ => 3,
        }
    }
}
