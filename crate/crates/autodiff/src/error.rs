use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{len} elements cannot fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("drop probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("causal convolution kernel size must be >= 1, got {0}")]
    InvalidKernel(usize),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("parameter lookup on a tape without a parameter store")]
    NoParameters,
    #[error("archive: {0}")]
    Archive(String),
    #[error("archive format version {found} is not supported (expected {expected})")]
    ArchiveVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
