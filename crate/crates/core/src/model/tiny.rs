//! Tiny reference model: a whitespace tokenizer over a fixed word table,
//! orthonormal token embeddings, a single bilinear context-mixing block,
//! a linear classification head, and an MLM head tied to the embedding
//! table.
//!
//! The layout is chosen so that closed-form gradients exist and the MLM
//! head reconstructs unperturbed inputs exactly: embedding rows are built
//! from a scaled Hadamard matrix (pairwise orthogonal) plus a small seeded
//! jitter, and the mixing block moves hidden states by far less than the
//! inter-token margin.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{self, Vocab, MASK_ID, SEP_ID};
use super::{HiddenStates, LocalModel};
use crate::types::{EmbeddedInput, LabeledSample, TokenSequence};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"GTTINY01";

/// Frobenius norm of the context-mixing matrix; small enough that mixing
/// never overturns the own-token MLM logit on unperturbed input.
const MIX_NORM: f64 = 0.15;

/// Scale of the jitter added to the orthogonal embedding rows.
const JITTER: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct TinyModel {
    vocab: Vocab,
    /// Token embedding table, one unit-norm row per vocabulary entry.
    pub(crate) embeddings: Array2<f64>,
    /// Context-mixing matrix of the encoder block.
    pub(crate) mix: Array2<f64>,
    /// Classification head weights, one row per class.
    pub(crate) class_w: Array2<f64>,
    pub(crate) class_b: Array1<f64>,
    /// Per-vocabulary-entry bias of the MLM head.
    pub(crate) mlm_bias: Array1<f64>,
    num_classes: usize,
    seed: u64,
}

impl TinyModel {
    /// Standard 64-word instance with a 2-class head.
    pub fn new(seed: u64) -> Self {
        Self::with_dims(64, 2, seed)
    }

    /// Instance with a truncated vocabulary. The embedding width is the
    /// smallest power of two holding the table orthogonally.
    pub fn with_dims(vocab_size: usize, num_classes: usize, seed: u64) -> Self {
        let vocab = Vocab::with_size(vocab_size).expect("supported vocab size");
        let dim = vocab_size.next_power_of_two().max(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut embeddings = hadamard(dim)
            .slice_move(ndarray::s![..vocab_size, ..])
            .mapv(|v| v / (dim as f64).sqrt());
        // Jitter breaks exact orthogonality so distinct substitutions get
        // distinct similarity scores, then rows are renormalized.
        for mut row in embeddings.rows_mut() {
            for v in row.iter_mut() {
                *v += JITTER * rng.random_range(-1.0..1.0);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }

        let mut mix = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-1.0..1.0));
        let norm = mix.iter().map(|v| v * v).sum::<f64>().sqrt();
        mix.mapv_inplace(|v| v * MIX_NORM / norm);

        Self {
            vocab,
            embeddings,
            mix,
            class_w: Array2::zeros((num_classes, dim)),
            class_b: Array1::zeros(num_classes),
            mlm_bias: Array1::zeros(vocab_size),
            num_classes,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embedding_table(&self) -> &Array2<f64> {
        &self.embeddings
    }

    /// Fit the classification head by deterministic full-batch gradient
    /// descent on the softmax cross-entropy, leaving every other parameter
    /// untouched. Returns training accuracy.
    pub fn fit_task_head(
        &mut self,
        samples: &[LabeledSample],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<f64> {
        let dim = self.embed_dim();
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        // Pooled features do not depend on the head, so extract them once.
        let mut feats = Array2::zeros((n, dim));
        for (i, s) in samples.iter().enumerate() {
            let tokens = self.tokenize(&s.text_a, s.text_b.as_deref())?;
            let emb = self.embed(&tokens)?;
            let hidden = self.forward_hidden(&emb)?;
            feats
                .row_mut(i)
                .assign(&hidden.states.mean_axis(Axis(0)).expect("nonempty"));
        }

        for _ in 0..epochs {
            let logits = feats.dot(&self.class_w.t()) + &self.class_b;
            let mut grad_z = softmax_rows(&logits);
            for (i, s) in samples.iter().enumerate() {
                grad_z[[i, s.gold_label]] -= 1.0;
            }
            grad_z.mapv_inplace(|v| v / n as f64);
            let grad_w = grad_z.t().dot(&feats);
            let grad_b = grad_z.sum_axis(Axis(0));
            self.class_w = &self.class_w - &grad_w.mapv(|v| v * learning_rate);
            self.class_b = &self.class_b - &grad_b.mapv(|v| v * learning_rate);
        }

        let logits = feats.dot(&self.class_w.t()) + &self.class_b;
        let correct = samples
            .iter()
            .enumerate()
            .filter(|(i, s)| {
                let row: Vec<f64> = logits.row(*i).to_vec();
                super::argmax_lowest(&row) == s.gold_label
            })
            .count();
        Ok(correct as f64 / n as f64)
    }

    /// Write the model as a flat array file with a small header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_u32::<LittleEndian>(self.embed_dim() as u32)?;
        f.write_u32::<LittleEndian>(self.vocab_size() as u32)?;
        f.write_u32::<LittleEndian>(self.num_classes as u32)?;
        f.write_u64::<LittleEndian>(self.seed)?;
        for arr in [&self.embeddings, &self.mix, &self.class_w] {
            for &v in arr.iter() {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        for arr in [&self.class_b, &self.mlm_bias] {
            for &v in arr.iter() {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Load a model written by [`TinyModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| Error::MalformedCheckpoint("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::MalformedCheckpoint("bad magic".into()));
        }
        let dim = f.read_u32::<LittleEndian>()? as usize;
        let vocab_size = f.read_u32::<LittleEndian>()? as usize;
        let num_classes = f.read_u32::<LittleEndian>()? as usize;
        let seed = f.read_u64::<LittleEndian>()?;

        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f.read_f64::<LittleEndian>().map_err(|_| {
                    Error::MalformedCheckpoint("truncated array data".into())
                })?);
            }
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::MalformedCheckpoint(e.to_string()))
        };

        let embeddings = read_matrix(vocab_size, dim)?;
        let mix = read_matrix(dim, dim)?;
        let class_w = read_matrix(num_classes, dim)?;
        let class_b = read_matrix(1, num_classes)?.row(0).to_owned();
        let mlm_bias = read_matrix(1, vocab_size)?.row(0).to_owned();

        Ok(Self {
            vocab: Vocab::with_size(vocab_size)?,
            embeddings,
            mix,
            class_w,
            class_b,
            mlm_bias,
            num_classes,
            seed,
        })
    }

    /// Shared forward core: perturbed embeddings to hidden states.
    fn hidden_from(&self, x: &Array2<f64>) -> Array2<f64> {
        let context = x.mean_axis(Axis(0)).expect("nonempty sequence");
        let mixed = self.mix.dot(&context);
        x + &mixed
    }

    fn composite_parts(
        &self,
        x: &Array2<f64>,
        mlm_targets: &TokenSequence,
        gold_label: usize,
    ) -> Result<LossParts> {
        if gold_label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: gold_label,
                num_classes: self.num_classes,
            });
        }
        let hidden = self.hidden_from(x);

        let pooled = hidden.mean_axis(Axis(0)).expect("nonempty");
        let z = self.class_w.dot(&pooled) + &self.class_b;
        let task_loss = log_sum_exp(z.as_slice().expect("contiguous")) - z[gold_label];

        let mlm = hidden.dot(&self.embeddings.t()) + &self.mlm_bias;
        let positions = mlm_targets.content_positions();
        let mut mlm_loss = 0.0;
        for &i in &positions {
            let row = mlm.row(i);
            let target = mlm_targets.token_ids[i] as usize;
            mlm_loss += log_sum_exp(row.as_slice().expect("contiguous")) - row[target];
        }
        mlm_loss /= positions.len().max(1) as f64;

        Ok(LossParts {
            z,
            mlm,
            positions,
            task_loss,
            mlm_loss,
        })
    }
}

struct LossParts {
    z: Array1<f64>,
    mlm: Array2<f64>,
    positions: Vec<usize>,
    task_loss: f64,
    mlm_loss: f64,
}

impl LocalModel for TinyModel {
    fn name(&self) -> &str {
        "tiny"
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn mask_token_id(&self) -> u32 {
        MASK_ID
    }

    fn is_special_token_id(&self, id: u32) -> bool {
        self.vocab.is_special(id)
    }

    fn token_surface(&self, id: u32) -> &str {
        self.vocab.surface(id)
    }

    fn tokenize(&self, text_a: &str, text_b: Option<&str>) -> Result<TokenSequence> {
        if text_a.trim().is_empty() {
            return Err(Error::Tokenization("empty input text".into()));
        }
        let mut token_ids = vec![vocab::BOS_ID];
        let push_segment = |ids: &mut Vec<u32>, text: &str| -> Result<()> {
            for word in text.split_whitespace() {
                let id = self.vocab.id_of(word).ok_or_else(|| {
                    Error::Tokenization(format!("word `{word}` outside model coverage"))
                })?;
                ids.push(id);
            }
            Ok(())
        };
        push_segment(&mut token_ids, text_a)?;
        if let Some(b) = text_b {
            token_ids.push(SEP_ID);
            push_segment(&mut token_ids, b)?;
        }
        token_ids.push(vocab::EOS_ID);

        // The mask token occupies a content position: it is embedded,
        // perturbed, and decoded like any word.
        let special_mask: Vec<bool> = token_ids
            .iter()
            .map(|&id| self.vocab.is_special(id) && id != MASK_ID)
            .collect();
        let mut seq = TokenSequence {
            token_ids,
            special_mask,
            surface: String::new(),
        };
        seq.surface = self.detokenize(&seq);
        seq.validate()?;
        Ok(seq)
    }

    fn detokenize(&self, tokens: &TokenSequence) -> String {
        let mut words = Vec::new();
        for (i, &id) in tokens.token_ids.iter().enumerate() {
            if tokens.special_mask[i] {
                if id == SEP_ID {
                    words.push("|||");
                }
                continue;
            }
            words.push(self.vocab.surface(id));
        }
        words.join(" ")
    }

    fn embed(&self, tokens: &TokenSequence) -> Result<EmbeddedInput> {
        tokens.validate()?;
        let mut out = Array2::zeros((tokens.len(), self.embed_dim()));
        for (i, &id) in tokens.token_ids.iter().enumerate() {
            if id as usize >= self.vocab_size() {
                return Err(Error::Tokenization(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab_size()
                )));
            }
            out.row_mut(i).assign(&self.embeddings.row(id as usize));
        }
        Ok(EmbeddedInput::new(out))
    }

    fn forward_hidden(&self, emb: &EmbeddedInput) -> Result<HiddenStates> {
        if !emb.all_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(HiddenStates {
            states: self.hidden_from(&emb.embeddings),
        })
    }

    fn task_logits(&self, hidden: &HiddenStates) -> Vec<f64> {
        let pooled = hidden.states.mean_axis(Axis(0)).expect("nonempty");
        (self.class_w.dot(&pooled) + &self.class_b).to_vec()
    }

    fn mlm_logits(&self, hidden: &HiddenStates) -> Array2<f64> {
        hidden.states.dot(&self.embeddings.t()) + &self.mlm_bias
    }

    fn loss(
        &self,
        base: &EmbeddedInput,
        delta: &Array2<f64>,
        mlm_targets: &TokenSequence,
        gold_label: usize,
        beta: f64,
    ) -> Result<f64> {
        let x = &base.embeddings + delta;
        let parts = self.composite_parts(&x, mlm_targets, gold_label)?;
        let loss = parts.task_loss + beta * parts.mlm_loss;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(loss)
    }

    fn loss_and_grad(
        &self,
        base: &EmbeddedInput,
        delta: &Array2<f64>,
        mlm_targets: &TokenSequence,
        gold_label: usize,
        beta: f64,
    ) -> Result<(f64, Array2<f64>)> {
        let x = &base.embeddings + delta;
        let n = x.nrows();
        let parts = self.composite_parts(&x, mlm_targets, gold_label)?;
        let loss = parts.task_loss + beta * parts.mlm_loss;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }

        // Task branch. Pooling and context mixing are both means over rows,
        // so every input row receives the same contribution
        //   (1/n) (I + A)ᵀ Wᵀ (softmax(z) − onehot(y)).
        let mut q = softmax_vec(&parts.z);
        q[gold_label] -= 1.0;
        let wq = self.class_w.t().dot(&Array1::from_vec(q));
        let task_row = (&wq + &self.mix.t().dot(&wq)).mapv(|v| v / n as f64);

        // MLM branch: per-position softmax error pulled back through the
        // tied table, plus the shared context term.
        let m = parts.positions.len().max(1) as f64;
        let mut err = Array2::zeros(parts.mlm.raw_dim());
        for &i in &parts.positions {
            let mut row = softmax_row(&parts.mlm.row(i).to_owned());
            row[mlm_targets.token_ids[i] as usize] -= 1.0;
            err.row_mut(i).assign(&row.mapv(|v| v / m));
        }
        let grad_hidden = err.dot(&self.embeddings);
        let context_term = self
            .mix
            .t()
            .dot(&grad_hidden.sum_axis(Axis(0)))
            .mapv(|v| v / n as f64);

        let mut grad = grad_hidden;
        for mut row in grad.rows_mut() {
            row += &context_term;
        }
        grad.mapv_inplace(|v| v * beta);
        for mut row in grad.rows_mut() {
            row += &task_row;
        }

        Ok((loss, grad))
    }
}

/// Sylvester-construction Hadamard matrix of power-of-two order.
fn hadamard(order: usize) -> Array2<f64> {
    assert!(order.is_power_of_two(), "Hadamard order must be 2^k");
    let mut h = Array2::from_elem((1, 1), 1.0);
    let mut size = 1;
    while size < order {
        let mut next = Array2::zeros((2 * size, 2 * size));
        for i in 0..size {
            for j in 0..size {
                let v = h[[i, j]];
                next[[i, j]] = v;
                next[[i, j + size]] = v;
                next[[i + size, j]] = v;
                next[[i + size, j + size]] = -v;
            }
        }
        h = next;
        size *= 2;
    }
    h
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_vec(z: &Array1<f64>) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

fn softmax_row(row: &Array1<f64>) -> Array1<f64> {
    Array1::from_vec(softmax_vec(row))
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let soft = softmax_row(&row.to_owned());
        row.assign(&soft);
    }
    out
}
