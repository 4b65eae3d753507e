use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the labeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain an operation accepts (bad index, shape mismatch).
    #[error("domain error: {0}")]
    Domain(String),

    /// The experiment configuration cannot be satisfied.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is malformed or incomplete.
    #[error("data error in scene `{scene}`: {message}")]
    Data { scene: String, message: String },

    /// A class required for training does not occur in the training data.
    #[error("class `{class}` of the {layer} layer is absent from the training data")]
    MissingClass { layer: String, class: String },

    /// An objective or potential evaluated to a non-finite number.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Exhaustive inference was asked to enumerate too many configurations.
    #[error("configuration space of {0} labelings is too large for exact inference")]
    TooLarge(f64),

    #[error("model container: {0}")]
    Format(String),

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
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(scene: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            scene: scene.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
