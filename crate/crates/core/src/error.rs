use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch at {block}: expected {expected}, got {got}")]
    Dimension {
        block: String,
        expected: String,
        got: String,
    },

    #[error("structure block m={m} out of range (valid: 1..{num_blocks})")]
    BlockOutOfRange { m: usize, num_blocks: usize },

    #[error("invalid label(s) {labels:?}: {reason}")]
    InvalidLabels { labels: Vec<u32>, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("toy world smoke check failed for seed {seed}: {detail}; try a different seed")]
    SmokeCheck { seed: u64, detail: String },

    #[error("non-finite loss in {stage} at iteration {iteration}: {detail}")]
    NonFinite {
        stage: &'static str,
        iteration: usize,
        detail: String,
    },

    #[error("generator fingerprint mismatch: code was built with {expected}, generator is {found}")]
    Fingerprint { expected: String, found: String },

    #[error("corrupt archive {path}: {reason}")]
    Archive { path: PathBuf, reason: String },

    #[error("missing archive entry `{0}`")]
    MissingEntry(String),

    #[error("invalid request: {0}")]
    Request(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stage label of the outermost stage wrapper, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
