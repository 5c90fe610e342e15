use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("point outside the unit cube: {0:?}")]
    OutOfDomain(Vec<f64>),

    #[error("non-finite loss at batch pair {index}")]
    NonFiniteLoss { index: usize },

    #[error("corpus quota not filled after {draws} draws; per-bin fill counts {fills:?} (quota {quota})")]
    QuotaExhausted {
        draws: usize,
        quota: usize,
        fills: Vec<usize>,
    },

    #[error("singular posterior covariance")]
    Singular,

    #[error("degenerate GAP normalization: optimum {y_star} lies below the initial best {y0}")]
    DegenerateGap { y0: f64, y_star: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("missing checkpoint for dimension(s) {0:?}")]
    MissingCheckpoint(Vec<usize>),

    #[error("unknown objective `{0}`")]
    UnknownObjective(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_good: Box<crate::trainer::Checkpoint>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
