use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SituError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("frame {image_id}: {message}")]
    Frame { image_id: String, message: String },

    #[error("embedding store: {0}")]
    Store(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<SituError>,
    },
}

impl SituError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SituError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SituError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn frame(image_id: impl Into<String>, message: impl Into<String>) -> Self {
        SituError::Frame {
            image_id: image_id.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with a location such as a step number or frame id.
    pub fn context(self, context: impl Into<String>) -> Self {
        SituError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, SituError>;
