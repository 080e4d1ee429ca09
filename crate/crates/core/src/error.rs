use std::path::PathBuf;

use crate::secd::SecdError;

/// Errors raised by the decoding pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("resolution {resolution}px is not a multiple of patch size {patch_px}px")]
    NonDivisibleResolution { resolution: usize, patch_px: usize },

    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),

    #[error("grid mismatch: {from:?} cannot be mapped onto {to:?}")]
    GridMismatch { from: (usize, usize), to: (usize, usize) },

    #[error("empty grid")]
    EmptyGrid,

    #[error("cross-attention has no rows")]
    EmptyCrossAttention,

    #[error("attention map has zero total mass")]
    ZeroMassAttention,

    #[error("attention map is not normalized")]
    NotNormalized,

    #[error("entropy is undefined on a single-patch grid")]
    SinglePatchGrid,

    #[error("invalid attention values: {0}")]
    InvalidAttention(String),

    #[error("entropy {0} outside [0, 1]")]
    OutOfRangeEntropy(f64),

    #[error("lambda must be positive and finite, got {0}")]
    NonPositiveLambda(f64),

    #[error("accumulator is empty")]
    EmptyAccumulator,

    #[error("vocabulary mismatch: {expected} vs {actual}")]
    VocabMismatch { expected: usize, actual: usize },

    #[error("logit vector needs at least 2 finite entries: {0}")]
    InvalidLogits(String),

    #[error("missing stage logits: {0}")]
    MissingStage(String),

    #[error("length mismatch: {0} steps vs {1} tokens")]
    LengthMismatch(usize, usize),

    #[error("token index {index} out of range for vocab {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },

    #[error("value {0} out of range")]
    OutOfRange(f64),

    #[error("degenerate dice input: attention and mask are both empty")]
    DegenerateInput,

    #[error("increment has support outside the object mask at patch {0}")]
    HypothesisViolated(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("case {0:?} not found")]
    MissingCase(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage {stage} of case {case:?}: {source}")]
    Stage {
        case: String,
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Secd {
        path: PathBuf,
        #[source]
        source: SecdError,
    },

    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by the run configuration rather than by data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidPlan(_)
                | Error::NonDivisibleResolution { .. }
                | Error::NonPositiveLambda(_)
        )
    }
}

/// Prefixes an I/O error with the path it concerns.
pub(crate) fn with_path(e: std::io::Error, path: &std::path::Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
