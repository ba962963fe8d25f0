use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cross entropy: every mask entry is false")]
    DegenerateMask,
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),
    #[error("query vector has zero norm; cosine similarity is undefined")]
    ZeroQuery,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(
        "context overflow: prompt {prompt} + features {features} + instruction {instruction} + target {target} + BOS = {total} exceeds capacity {capacity}"
    )]
    Capacity {
        prompt: usize,
        features: usize,
        instruction: usize,
        target: usize,
        total: usize,
        capacity: usize,
    },
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("optimizer state mismatch: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
