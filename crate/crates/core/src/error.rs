use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient points: need at least {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("pruning removed every kernel")]
    AllPruned,

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("singular innovation covariance")]
    SingularMatrix,

    #[error("object is out of view in frame {frame}")]
    OutOfView { frame: usize },

    #[error("optimization failed at iteration {iteration}: {reason}")]
    OptimizationFailure { iteration: usize, reason: String },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty silhouette")]
    EmptySilhouette,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
