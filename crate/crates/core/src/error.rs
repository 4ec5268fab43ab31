use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss or gradient: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),

    #[error("invalid variance {0} (must be finite and > 0)")]
    InvalidVariance(f64),

    #[error("Renyi divergence undefined (alpha = {alpha}) in latent dimension {dim}")]
    RenyiUndefined { alpha: f64, dim: usize },

    #[error("quadrature grid too narrow: boundary integrand mass {0:e}")]
    GridTooNarrow(f64),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("need {needed} classes but dataset has {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("invalid shift: {0}")]
    InvalidShift(String),

    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("truncated IDX file: {0}")]
    TruncatedFile(String),

    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("backward transfer needs at least two tasks")]
    SingleTask,

    #[error("missing forward-transfer baseline for task {0}")]
    MissingBaseline(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("task {task}, outer iteration {iter}: {source}")]
    AtIteration {
        task: usize,
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by arithmetic breaking down rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteLoss(_)
            | Error::NonFiniteActivation(_)
            | Error::RenyiUndefined { .. }
            | Error::InvalidVariance(_) => true,
            Error::AtIteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
