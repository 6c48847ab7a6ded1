use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operation `{op}` is not defined for objective kind `{kind}`")]
    InvalidKind { op: &'static str, kind: &'static str },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    /// Carries the minimum-norm solution with `mu = 0`.
    #[error("rank-deficient normal equations (numerical rank {rank} of {dim})")]
    RankDeficient {
        rank: usize,
        dim: usize,
        min_norm: Box<crate::oracle::ExactConstants>,
    },

    #[error("declared constants violated at witness point (ratio {ratio:.6e} > {declared:.6e})")]
    ConstantsInvalid {
        ratio: f64,
        declared: f64,
        witness: Vec<f64>,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
