use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(spectral_peft::Error),
}

impl From<spectral_peft::Error> for HarnessError {
    fn from(e: spectral_peft::Error) -> Self {
        match e {
            spectral_peft::Error::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
