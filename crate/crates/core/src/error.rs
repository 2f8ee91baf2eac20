use thiserror::Error;

/// Failure cases surfaced by the library. Numeric code never panics on bad
/// input; every precondition violation maps to one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },

    #[error("architecture: {0}")]
    Architecture(String),

    #[error("degenerate saliency: {0}")]
    DegenerateSaliency(String),

    #[error("task {task}: layer {layer} has no free neurons left")]
    CapacityExhausted { task: usize, layer: usize },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("blueprint: {0}")]
    Blueprint(String),

    #[error("metric: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
