//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or collection had the wrong dimensions for an operation.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    /// A scene violated its structural invariants.
    #[error("invalid scene `{scene_id}`: {msg}")]
    Scene { scene_id: String, msg: String },

    /// A data file could not be read or failed validation. `line` is
    /// 1-based; 0 means the problem concerns the file as a whole.
    #[error("data error at {path}:{line}: {msg}")]
    Data {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Bad configuration (out-of-range field, degenerate normalizer, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An agent type not present in the dataset's declared type set.
    #[error("unknown agent type `{0}`")]
    UnknownAgentType(String),

    /// Checkpoint file malformed or from an incompatible format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss or gradient stopped being finite during training.
    #[error("training fault at step {step}: {msg}")]
    Training { step: u64, msg: String },

    /// The ODE state stopped being finite during sampling.
    #[error("sampling fault at step {step}: {msg}")]
    Sampling { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn scene(scene_id: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Scene {
            scene_id: scene_id.into(),
            msg: msg.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
