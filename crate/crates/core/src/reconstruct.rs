//! Decode perturbed hidden states to candidate texts and apply the validity
//! gates: novelty, similarity, and antonym filtering.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::LocalModel;
use crate::types::{CandidateAdversary, TokenSequence};
use crate::{Error, Result};

/// Sentence-pair semantic similarity in `[-1, 1]`.
///
/// The default desk-scale scorer is the cosine of mean local-model
/// embeddings; runs against real checkpoints plug an external sentence
/// encoder in behind the same interface.
pub trait SentenceScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, a: &str, b: &str) -> Result<f64>;
}

/// Score two texts with the given scorer.
pub fn similarity(a: &str, b: &str, scorer: &dyn SentenceScorer) -> Result<f64> {
    scorer.score(a, b)
}

/// Cosine similarity of mean content-token embeddings under the local model.
pub struct MeanEmbedCosine {
    model: Arc<dyn LocalModel>,
}

impl MeanEmbedCosine {
    pub fn new(model: Arc<dyn LocalModel>) -> Self {
        Self { model }
    }

    fn mean_embedding(&self, text: &str) -> Result<Vec<f64>> {
        // Pair surfaces render as "a ||| b"; split back into segments.
        let (a, b) = split_rendered_pair(text);
        let tokens = self.model.tokenize(a, b)?;
        let emb = self.model.embed(&tokens)?;
        let content = tokens.content_positions();
        if content.is_empty() {
            return Err(Error::Tokenization("no content tokens to score".into()));
        }
        let dim = emb.dim();
        let mut mean = vec![0.0; dim];
        for &i in &content {
            for (j, slot) in mean.iter_mut().enumerate() {
                *slot += emb.embeddings[[i, j]];
            }
        }
        let n = content.len() as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        Ok(mean)
    }
}

impl SentenceScorer for MeanEmbedCosine {
    fn name(&self) -> &str {
        "mean-embed-cosine"
    }

    fn score(&self, a: &str, b: &str) -> Result<f64> {
        let u = self.mean_embedding(a)?;
        let v = self.mean_embedding(b)?;
        let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
    }
}

/// Split a rendered pair surface back into its segments.
fn split_rendered_pair(text: &str) -> (&str, Option<&str>) {
    match text.split_once(" ||| ") {
        Some((a, b)) => (a, Some(b)),
        None => (text, None),
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text_a: &'a str,
    text_b: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Remote sentence-encoder adapter: one HTTP POST per pair,
/// request `{"text_a", "text_b"}`, response `{"score"}`.
pub struct ExternalEncoderScorer {
    url: String,
    client: reqwest::blocking::Client,
}

impl ExternalEncoderScorer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::RemoteUnavailable {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(Self { url: url.into(), client })
    }
}

impl SentenceScorer for ExternalEncoderScorer {
    fn name(&self) -> &str {
        "external-sentence-encoder"
    }

    fn score(&self, a: &str, b: &str) -> Result<f64> {
        let resp = self
            .client
            .post(&self.url)
            .json(&ScoreRequest { text_a: a, text_b: b })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::RemoteUnavailable {
                attempts: 1,
                detail: e.to_string(),
            })?;
        let body: ScoreResponse = resp.json().map_err(|e| Error::RemoteUnavailable {
            attempts: 1,
            detail: format!("bad score payload: {e}"),
        })?;
        Ok(body.score)
    }
}

/// Resolve a scorer by its configured name.
pub fn scorer_by_name(
    name: &str,
    model: Arc<dyn LocalModel>,
    external_url: Option<&str>,
) -> Result<Arc<dyn SentenceScorer>> {
    match name {
        "mean-embed-cosine" => Ok(Arc::new(MeanEmbedCosine::new(model))),
        "external-sentence-encoder" => {
            let url = external_url.ok_or(Error::ScorerUnavailable(
                "external sentence-encoder endpoint",
            ))?;
            Ok(Arc::new(ExternalEncoderScorer::new(url, Duration::from_secs(10))?))
        }
        _ => Err(Error::ScorerUnavailable("similarity (unknown scorer name)")),
    }
}

/// Case-insensitive antonym table loaded from flat `word<TAB>antonym` lines.
/// Pairs are stored symmetrically; missing words map to the empty set.
#[derive(Debug, Clone, Default)]
pub struct AntonymLexicon {
    entries: HashMap<String, HashSet<String>>,
}

impl AntonymLexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lex = Self::empty();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (word, antonym) = trimmed.split_once('\t').ok_or_else(|| Error::Parse {
                line: idx + 1,
                detail: "expected `word<TAB>antonym`".into(),
            })?;
            lex.insert_pair(word.trim(), antonym.trim());
        }
        Ok(lex)
    }

    pub fn insert_pair(&mut self, a: &str, b: &str) {
        let a = a.to_lowercase();
        let b = b.to_lowercase();
        self.entries.entry(a.clone()).or_default().insert(b.clone());
        self.entries.entry(b).or_default().insert(a);
    }

    pub fn is_antonym_pair(&self, a: &str, b: &str) -> bool {
        self.entries
            .get(&a.to_lowercase())
            .is_some_and(|set| set.contains(&b.to_lowercase()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Greedy MLM decode: per non-special position take the argmax over content
/// vocabulary entries (ties to the lowest token id); special positions are
/// copied from the original sequence unchanged.
pub fn decode_tokens(
    logits: &Array2<f64>,
    original: &TokenSequence,
    model: &dyn LocalModel,
) -> TokenSequence {
    debug_assert_eq!(logits.nrows(), original.len());
    let mut token_ids = original.token_ids.clone();
    for i in 0..original.len() {
        if original.special_mask[i] {
            continue;
        }
        let row = logits.row(i);
        let mut best: Option<u32> = None;
        for id in 0..model.vocab_size() as u32 {
            if model.is_special_token_id(id) {
                continue;
            }
            match best {
                None => best = Some(id),
                Some(b) if row[id as usize] > row[b as usize] => best = Some(id),
                _ => {}
            }
        }
        token_ids[i] = best.expect("vocabulary has content entries");
    }
    let mut seq = TokenSequence {
        token_ids,
        special_mask: original.special_mask.clone(),
        surface: String::new(),
    };
    seq.surface = model.detokenize(&seq);
    seq
}

/// True iff the candidate's token ids differ from every stored decoding.
pub fn is_novel(candidate: &TokenSequence, previous: &HashSet<Vec<u32>>) -> bool {
    !previous.contains(&candidate.token_ids)
}

/// Antonym gate: returns false (reject) iff any changed position replaces a
/// word with one of its antonyms.
pub fn antonym_filter(
    original: &TokenSequence,
    candidate: &TokenSequence,
    lexicon: &AntonymLexicon,
    model: &dyn LocalModel,
) -> bool {
    debug_assert_eq!(original.len(), candidate.len());
    for i in 0..original.len() {
        if original.special_mask[i] || original.token_ids[i] == candidate.token_ids[i] {
            continue;
        }
        let from = model.token_surface(original.token_ids[i]);
        let to = model.token_surface(candidate.token_ids[i]);
        if lexicon.is_antonym_pair(from, to) {
            return false;
        }
    }
    true
}

/// Final acceptance: the queried-and-flipping candidate must strictly exceed
/// the similarity threshold.
pub fn accept_adversary(candidate: &CandidateAdversary, threshold: f64) -> bool {
    candidate.similarity_to_original > threshold
}
