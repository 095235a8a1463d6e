use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes disagree; `axis` names the offending dimension.
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Spatial dims that the network cannot down-sample evenly.
    #[error("input dims {dims:?} must each be divisible by {divisor}")]
    Indivisible { dims: [usize; 3], divisor: usize },

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
