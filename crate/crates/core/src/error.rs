use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("unknown encoder `{0}`")]
    UnknownEncoder(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("zero-norm embedding; cosine similarity is undefined ({0})")]
    ZeroNormEmbedding(String),

    #[error("timestep {timestep} outside the backbone range 0..{count}")]
    TimestepOutOfRange { timestep: usize, count: usize },

    #[error("encoder `{0}` exposes no spatial activation layer")]
    NoSpatialActivation(String),

    #[error("tap layer mismatch: {0}")]
    TapMismatch(String),

    #[error("bundle manifest field `{field}`: {reason}")]
    Manifest { field: String, reason: String },

    #[error("non-finite gradient from loss term `{0}`")]
    NonFiniteGradient(String),

    #[error(transparent)]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn manifest(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
