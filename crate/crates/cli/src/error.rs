use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Configuration problems; the driver exits with code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// A pipeline stage failed; the driver exits with code 3.
    #[error("stage `{stage}`: {message}")]
    Stage { stage: String, message: String },

    #[error(transparent)]
    Core(#[from] zrspeech_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: impl Into<String>, err: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage: stage.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
