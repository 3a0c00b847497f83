//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by attack construction, model evaluation, victim access,
/// dataset ingestion, and metric aggregation.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field violates its invariant.
    #[error("invalid config: field `{0}` violates its invariant ({1})")]
    InvalidConfig(&'static str, String),

    /// Input text contains tokens outside the model's coverage.
    #[error("tokenization failed: {0}")]
    Tokenization(String),

    /// Forward pass produced a non-finite loss value.
    #[error("non-finite loss encountered during forward pass")]
    NonFiniteLoss,

    /// Gradient norm too small to define a step direction.
    #[error("degenerate gradient: norm {0} below threshold")]
    DegenerateGradient(f64),

    /// Sequence has no position eligible for masking.
    #[error("no maskable position: all positions are special tokens")]
    NoMaskablePosition,

    /// Victim query budget exhausted.
    #[error("victim query budget exhausted ({used}/{budget})")]
    BudgetExhausted { used: usize, budget: usize },

    /// Remote victim endpoint unreachable after bounded retries.
    #[error("remote victim unavailable after {attempts} attempts: {detail}")]
    RemoteUnavailable { attempts: usize, detail: String },

    /// A quality metric backend is not configured.
    #[error("scorer unavailable: no {0} backend configured")]
    ScorerUnavailable(&'static str),

    /// Metric aggregation on an empty outcome list.
    #[error("empty input: at least one attack outcome required")]
    EmptyInput,

    /// Dataset line failed to parse.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// Dataset or artifact file missing.
    #[error("missing file: {0}")]
    MissingFile(String),

    /// Screening found fewer correctly classified samples than requested.
    #[error("insufficient correctly classified samples: {available} available, {requested} requested")]
    InsufficientCorrect { available: usize, requested: usize },

    /// Victim returned a label outside the task's class range.
    #[error("victim returned label {label} outside class range 0..{num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// Model checkpoint file is malformed.
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
