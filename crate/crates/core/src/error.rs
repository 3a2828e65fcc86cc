use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("class-count mismatch: expected {expected}, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("negative teacher loss {0}")]
    NegativeLoss(f64),

    #[error("labels required: labeled loss needs per-teacher task losses")]
    LabelsRequired,

    #[error("ensemble needs at least 2 teachers, got {0}")]
    TooFewTeachers(usize),

    #[error("both labeled and unlabeled batches are empty")]
    EmptyBatches,

    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("unknown column `{column}`")]
    UnknownColumn { column: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("checkpoint shape mismatch in layer {layer}: {message}")]
    ShapeMismatch { layer: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("teacher {index} failed to train: {source}")]
    TeacherTraining {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
