use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid annotation `{image_id}`: {reason}")]
    InvalidAnnotation { image_id: String, reason: String },

    #[error("annotation has no {0} points")]
    EmptyPointList(&'static str),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("coordinates are not sorted along the stack axis ({0})")]
    Unsorted(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index map is not a permutation: {0}")]
    NotAPermutation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene geometry does not fit: {0}")]
    GeometryOverflow(String),

    #[error("missing split `{0}`")]
    MissingSplit(String),

    #[error("no pure-plate (P) image in the training manifest; generate a dataset with a non-zero pure fraction")]
    NoPromptImage,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
