//! Gradient-based textual adversarial example toolkit.
//!
//! The search runs in token-embedding space: a local encoder supplies
//! gradients of a composite loss, small normalized steps accumulate inside
//! an L2 ball, and an MLM head decodes the perturbed hidden states back to
//! token sequences. Candidates that are novel and closer to the original
//! than anything tried before are sent to a decision-only victim under a
//! strict query budget. An evaluation suite aggregates success rate and
//! sample-quality metrics over a run.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod reconstruct;
pub mod runner;
pub mod synthetic;
pub mod types;
pub mod victim;

pub use config::{validate_config, AttackConfig};
pub use error::{Error, Result};
pub use types::{
    AttackOutcome, CandidateAdversary, Decision, EmbeddedInput, LabeledSample,
    PerturbationState, StepReport, TokenSequence,
};
