use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("volume header {path}: {reason}")]
    VolumeHeader { path: PathBuf, reason: String },

    #[error("volume payload {path}: expected {expected} voxels ({expected_bytes} bytes), file holds {actual_bytes} bytes")]
    VolumePayloadSize {
        path: PathBuf,
        expected: usize,
        expected_bytes: usize,
        actual_bytes: usize,
    },

    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: String, details: String },

    #[error("invalid argument for {context}: {details}")]
    InvalidArgument { context: String, details: String },

    #[error("non-finite value in {context}: {details}")]
    NonFinite { context: String, details: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("pipeline stage '{stage}' failed{}: {source}", .case.as_deref().map(|c| format!(" on case {c}")).unwrap_or_default())]
    Stage {
        stage: String,
        case: Option<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn shape(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage (and optionally the case) it occurred in.
    pub fn stage(stage: impl Into<String>, case: Option<&str>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            case: case.map(str::to_owned),
            source: Box::new(source),
        }
    }
}
