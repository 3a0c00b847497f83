//! Shared domain types used by every other module.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// A classification sample: one or two text segments plus a gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub text_a: String,
    /// Second segment for sentence-pair tasks (inference premise/hypothesis).
    pub text_b: Option<String>,
    pub gold_label: usize,
    pub num_classes: usize,
}

impl LabeledSample {
    pub fn validate(&self) -> crate::Result<()> {
        if self.text_a.trim().is_empty() {
            return Err(crate::Error::Parse {
                line: 0,
                detail: format!("sample `{}` has empty text_a", self.id),
            });
        }
        if self.gold_label >= self.num_classes {
            return Err(crate::Error::Parse {
                line: 0,
                detail: format!(
                    "sample `{}` label {} outside 0..{}",
                    self.id, self.gold_label, self.num_classes
                ),
            });
        }
        Ok(())
    }
}

/// A tokenized text: vocabulary ids, a special-position mask, and a surface rendering.
///
/// Positions flagged in `special_mask` (sequence delimiters, separators) are
/// never perturbed, masked, or decoded to a different token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub special_mask: Vec<bool>,
    pub surface: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Indices of positions that may be perturbed, masked, or re-decoded.
    pub fn content_positions(&self) -> Vec<usize> {
        self.special_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (!s).then_some(i))
            .collect()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.token_ids.is_empty() || self.token_ids.len() != self.special_mask.len() {
            return Err(crate::Error::Tokenization(format!(
                "token_ids ({}) and special_mask ({}) must be equal nonzero lengths",
                self.token_ids.len(),
                self.special_mask.len()
            )));
        }
        Ok(())
    }
}

/// Token embeddings for one sequence; row `i` is the embedding of token `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedInput {
    pub embeddings: Array2<f64>,
}

impl EmbeddedInput {
    pub fn new(embeddings: Array2<f64>) -> Self {
        Self { embeddings }
    }

    pub fn seq_len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.embeddings.iter().all(|v| v.is_finite())
    }
}

/// Mutable search state for one attack session.
///
/// `delta` accumulates across iterations; the search never re-snaps to the
/// embeddings of decoded tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationState {
    /// Current perturbation, same shape as the base embeddings.
    pub delta: Array2<f64>,
    /// Iteration index, incremented exactly once per engine step.
    pub step: usize,
    /// Unperturbed embeddings of the (possibly masked) input.
    pub base_embeddings: EmbeddedInput,
    /// Special-position flags carried over from the originating sequence.
    pub special_mask: Vec<bool>,
    /// Token-id sequences decoded so far, seeded with the decoding of the
    /// unperturbed input.
    pub previous_decodings: HashSet<Vec<u32>>,
    /// Best similarity among candidates queried so far; `None` until the
    /// first query so the first novel candidate always qualifies.
    pub best_similarity_so_far: Option<f64>,
}

impl PerturbationState {
    pub fn new(base: EmbeddedInput, special_mask: Vec<bool>) -> Self {
        let shape = (base.seq_len(), base.dim());
        Self {
            delta: Array2::zeros(shape),
            step: 0,
            base_embeddings: base,
            special_mask,
            previous_decodings: HashSet::new(),
            best_similarity_so_far: None,
        }
    }

    /// Flattened L2 norm of the current perturbation.
    pub fn delta_norm(&self) -> f64 {
        frobenius_norm(&self.delta)
    }

    /// Perturbed embeddings `E + delta`.
    pub fn perturbed(&self) -> EmbeddedInput {
        EmbeddedInput::new(&self.base_embeddings.embeddings + &self.delta)
    }

    pub fn similarity_bar(&self) -> f64 {
        self.best_similarity_so_far.unwrap_or(f64::NEG_INFINITY)
    }
}

/// L2 norm of a matrix viewed as a flat vector.
pub fn frobenius_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A decoded candidate with its gate bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAdversary {
    pub tokens: TokenSequence,
    pub similarity_to_original: f64,
    /// True iff the token ids differed from every previous decoding at creation.
    pub is_novel: bool,
    pub iteration_found: usize,
}

/// A victim's answer: the predicted class index and nothing else.
///
/// No confidence field exists by construction; adapters that see scores must
/// strip them before this type is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub predicted_label: usize,
}

impl Decision {
    pub fn checked(predicted_label: usize, num_classes: usize) -> crate::Result<Self> {
        if predicted_label >= num_classes {
            return Err(crate::Error::LabelOutOfRange {
                label: predicted_label,
                num_classes,
            });
        }
        Ok(Self { predicted_label })
    }
}

/// Per-sample attack result, persisted as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub sample_id: String,
    pub success: bool,
    pub adversarial_text: Option<String>,
    pub queries_used: usize,
    pub iterations_used: usize,
    pub final_similarity: Option<f64>,
}

/// Per-iteration telemetry emitted when verbose tracing is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub delta_norm: f64,
    pub reinitialized: bool,
}
