use thiserror::Error;
use tptn_autodiff::TensorError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{line}:{col}: {msg}")]
    BvhSyntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("joint {joint}: unsupported channel arrangement {channels:?}")]
    UnsupportedChannels {
        joint: String,
        channels: Vec<String>,
    },
    #[error("header declares {declared} frames but {found} were found")]
    FrameCount { declared: usize, found: usize },
    #[error("skeleton: {0}")]
    Skeleton(String),
    #[error("joint {joint} has non-unit quaternion (norm {norm})")]
    NonUnitQuaternion { joint: String, norm: f64 },
    #[error("joint {0} has no mirror partner")]
    MissingMirrorPair(String),
    #[error("cannot resample from {from} fps to {to} fps: ratio is not an integer")]
    Resample { from: f64, to: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
