use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {values} values")]
    InvalidShape { shape: Vec<usize>, values: usize },

    #[error("backward called before any forward computation was recorded")]
    BackwardBeforeForward,

    #[error("backward already ran on this graph; rebuild it with a fresh forward pass")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter layouts differ")]
    LayoutMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot sample from an empty pool")]
    EmptyPool,

    #[error("not enough classes: {0}")]
    InsufficientClasses(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
