use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("cross entropy: no contributing positions (every target is ignored)")]
    NoContributingPositions,

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty feature sequence for modality {0}")]
    EmptySequence(usize),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("expected {expected} modalities, got {got}")]
    ModalityMismatch { expected: usize, got: usize },

    #[error("beam size must be at least 1")]
    InvalidBeam,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("candidate {index} has no references")]
    NoReferences { index: usize },

    #[error("degenerate idf: need at least 2 reference sets, got {0}")]
    DegenerateIdf(usize),

    #[error("unknown video id {0:?}")]
    UnknownVideo(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("{what}: bad magic {found:?}")]
    BadMagic { what: &'static str, found: [u8; 4] },

    #[error("{what}: unsupported format version {version}")]
    BadVersion { what: &'static str, version: u32 },

    #[error("{what}: truncated file")]
    Truncated { what: &'static str },

    #[error("{what}: non-finite value at index {index}")]
    NonFiniteValue { what: &'static str, index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("video {video:?}, modality {modality:?}: declared dim {expected}, file has {got}")]
    Dimension {
        video: String,
        modality: String,
        expected: usize,
        got: usize,
    },

    #[error("unknown modality {0:?}")]
    UnknownModality(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

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
}
