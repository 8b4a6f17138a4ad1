use std::path::Path;

/// Errors produced anywhere in the workbench.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("{path}: parse error at byte offset {offset}: {reason}")]
    Parse {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("layer {index} (`{name}`): {reason}")]
    Layer {
        index: usize,
        name: String,
        reason: String,
    },

    #[error("unknown component marker `{0}`")]
    UnknownMarker(String),

    #[error("missing gradient for unfrozen parameter `{0}`")]
    MissingGrad(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("frozen parameter `{0}` changed during training")]
    FreezeViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("report: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
