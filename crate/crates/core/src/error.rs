use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} is invalid for a tensor of rank {ndim}")]
    InvalidAxis {
        op: &'static str,
        axis: isize,
        ndim: usize,
    },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("conv2d: kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: [usize; 2],
        input: [usize; 2],
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("rotation projection is degenerate (singular values {0:?})")]
    DegenerateRotation([f64; 3]),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite loss at step {step} in task `{task}` (value {value})")]
    NonFiniteLoss {
        step: usize,
        task: String,
        value: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
