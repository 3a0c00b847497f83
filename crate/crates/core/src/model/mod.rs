//! Abstract local-model interface: tokenizer, embedding layer, encoder,
//! task head, MLM decoder head, and gradients of the composite loss.
//!
//! The attack engine only ever talks to [`LocalModel`]; the tiny reference
//! implementation in [`tiny`] backs desk-scale runs and tests, and real
//! pretrained checkpoints plug in behind the same trait with no attack
//! logic of their own.

mod vocab;

pub mod tiny;

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::types::{Decision, EmbeddedInput, TokenSequence};
use crate::{Error, Result};

pub use tiny::TinyModel;
pub use vocab::{
    Vocab, BOS_ID, EOS_ID, MASK_ID, MASK_TOKEN, NEGATIVE_WORDS, NEUTRAL_WORDS, NUM_SPECIAL,
    PAD_ID, POSITIVE_WORDS, SEP_ID,
};

/// Encoder output, one row per input position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenStates {
    pub states: Array2<f64>,
}

impl HiddenStates {
    pub fn seq_len(&self) -> usize {
        self.states.nrows()
    }

    pub fn all_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }
}

/// Local encoder/decoder model used to search for adversarial samples.
///
/// All methods are deterministic given the model parameters and inputs, and
/// implementations are immutable after load so parallel attack sessions can
/// share one handle.
pub trait LocalModel: Send + Sync {
    fn name(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    fn mask_token_id(&self) -> u32;

    /// Vocabulary entries that must never appear at a decoded content
    /// position (delimiters, padding, the mask token).
    fn is_special_token_id(&self, id: u32) -> bool;

    /// Surface form of one vocabulary entry.
    fn token_surface(&self, id: u32) -> &str;

    /// Tokenize one segment or a pair into a single flagged sequence.
    fn tokenize(&self, text_a: &str, text_b: Option<&str>) -> Result<TokenSequence>;

    /// Canonical surface rendering; pair segments are joined with `|||`.
    fn detokenize(&self, tokens: &TokenSequence) -> String;

    /// Embedding-table lookup, row `i` = embedding of token `i`.
    fn embed(&self, tokens: &TokenSequence) -> Result<EmbeddedInput>;

    /// Encoder layers mapping (possibly perturbed) embeddings to hidden states.
    fn forward_hidden(&self, emb: &EmbeddedInput) -> Result<HiddenStates>;

    /// Class logits for the whole sequence.
    fn task_logits(&self, hidden: &HiddenStates) -> Vec<f64>;

    /// Per-position vocabulary logits of the MLM decoder head.
    fn mlm_logits(&self, hidden: &HiddenStates) -> Array2<f64>;

    /// Composite loss at `E + delta`: task loss plus `beta` times the MLM
    /// reconstruction loss against `mlm_targets` at non-special positions.
    fn loss(
        &self,
        base: &EmbeddedInput,
        delta: &Array2<f64>,
        mlm_targets: &TokenSequence,
        gold_label: usize,
        beta: f64,
    ) -> Result<f64>;

    /// Composite loss and its analytic gradient with respect to `delta`.
    fn loss_and_grad(
        &self,
        base: &EmbeddedInput,
        delta: &Array2<f64>,
        mlm_targets: &TokenSequence,
        gold_label: usize,
        beta: f64,
    ) -> Result<(f64, Array2<f64>)>;

    /// Full forward pass from text to a label decision (argmax of task
    /// logits, ties broken by lowest class index).
    fn classify_text(&self, text_a: &str, text_b: Option<&str>) -> Result<Decision> {
        let tokens = self.tokenize(text_a, text_b)?;
        let emb = self.embed(&tokens)?;
        let hidden = self.forward_hidden(&emb)?;
        let logits = self.task_logits(&hidden);
        Ok(Decision {
            predicted_label: argmax_lowest(&logits),
        })
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Central finite-difference gradient of the composite loss with respect to
/// `delta`. Only touches the forward pass, so it serves as an independent
/// oracle for [`LocalModel::loss_and_grad`].
pub fn finite_difference_grad(
    model: &dyn LocalModel,
    base: &EmbeddedInput,
    delta: &Array2<f64>,
    mlm_targets: &TokenSequence,
    gold_label: usize,
    beta: f64,
    h: f64,
) -> Result<Array2<f64>> {
    let mut grad = Array2::zeros(delta.raw_dim());
    let mut probe = delta.clone();
    for i in 0..delta.nrows() {
        for j in 0..delta.ncols() {
            let orig = probe[[i, j]];
            probe[[i, j]] = orig + h;
            let plus = model.loss(base, &probe, mlm_targets, gold_label, beta)?;
            probe[[i, j]] = orig - h;
            let minus = model.loss(base, &probe, mlm_targets, gold_label, beta)?;
            probe[[i, j]] = orig;
            grad[[i, j]] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Relative disagreement between two gradients, measured on the flattened
/// vectors: `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn gradient_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = a - b;
    let denom = crate::types::frobenius_norm(a)
        .max(crate::types::frobenius_norm(b))
        .max(1e-12);
    crate::types::frobenius_norm(&diff) / denom
}

/// Resolve a local-model spec string.
///
/// `tiny:SEED` builds the built-in reference model; any other value is
/// treated as a path to a saved tiny checkpoint. Real transformer families
/// would register additional prefixes here.
pub fn load_local_model(spec: &str) -> Result<Arc<dyn LocalModel>> {
    if let Some(seed) = spec.strip_prefix("tiny:") {
        let seed: u64 = seed.parse().map_err(|_| {
            Error::MalformedCheckpoint(format!("bad tiny model seed `{seed}`"))
        })?;
        return Ok(Arc::new(TinyModel::new(seed)));
    }
    Ok(Arc::new(TinyModel::load(std::path::Path::new(spec))?))
}
