use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] scfm_core::Error),
}

impl ExperimentError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for config errors, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Core(scfm_core::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;
