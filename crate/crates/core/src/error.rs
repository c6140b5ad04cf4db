use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NsaError {
    #[error("crop window {window:?} lies outside the resized image {resized:?}")]
    CropOutOfRange {
        window: (f64, f64, f64, f64),
        resized: (f64, f64),
    },
    #[error("invalid geometric record: {0}")]
    InvalidGeo(String),
    #[error("label frame {labels:#x} does not match record source frame {record:#x}")]
    FrameMismatch { labels: u64, record: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("training state error: {0}")]
    State(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = NsaError> = std::result::Result<T, E>;

impl NsaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NsaError::Io {
            path: path.into(),
            source,
        }
    }
}
