//! Crate-wide error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("row {row} has L2 norm below 1e-12 and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("function evaluated to a non-finite value during finite differencing")]
    NonFiniteEvaluation,

    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },

    #[error("caption {0:?} is not present in the caption table")]
    UnknownCaption(String),

    #[error("class name must be nonempty")]
    EmptyClassName,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("identity {0} appears more than once in a pair batch")]
    DuplicateIdentity(usize),

    #[error("batch of {requested} requested but only {available} samples available")]
    BatchTooLarge { requested: usize, available: usize },

    #[error("{requested} identities requested but only {available} available")]
    NotEnoughIdentities { requested: usize, available: usize },

    #[error("identity {0} has a single image; pair sampling needs at least two")]
    IdentityHasSingleImage(usize),

    #[error("step {step} out of range for a schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("shape mismatch in optimizer step: params {expected}, grads {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,

    #[error("loss became non-finite at step {step}; run aborted")]
    DivergenceDetected { step: usize },

    #[error("k={k} out of range for {max} candidates")]
    KOutOfRange { k: usize, max: usize },

    #[error("genuine and impostor score lists must both be nonempty")]
    EmptyScores,

    #[error("at least one embedding per class is required")]
    EmptyClass,

    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed data file: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
