//! Deterministic synthetic corpora for desk-scale calibration and the
//! self-test suite.
//!
//! Sentences mix polarity words with neutral filler so that the class is
//! decided by a small majority margin; most samples can therefore be
//! flipped by a single word substitution, which the exhaustive oracle below
//! verifies independently of the attack path.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{LocalModel, NEGATIVE_WORDS, NEUTRAL_WORDS, POSITIVE_WORDS};
use crate::reconstruct::AntonymLexicon;
use crate::types::LabeledSample;
use crate::Result;

/// Shape of a generated corpus.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_samples: usize,
    /// Content words per sentence, inclusive bounds.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of samples built with a majority margin of two instead of
    /// one. Margin-one sentences always admit a single-substitution flip.
    pub margin_two_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            min_len: 4,
            max_len: 8,
            margin_two_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Generate a linearly separable 2-class corpus: label 1 sentences carry a
/// positive-word majority, label 0 a negative-word majority.
pub fn generate_corpus(spec: &CorpusSpec) -> Vec<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for idx in 0..spec.n_samples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let label = rng.random_range(0..2usize);
        let margin = if rng.random_range(0.0..1.0) < spec.margin_two_fraction {
            2
        } else {
            1
        };
        // majority + minority counts within pool sizes and sentence length
        let max_minority = ((len - margin) / 2)
            .min(POSITIVE_WORDS.len() - margin)
            .min(NEGATIVE_WORDS.len());
        let minority = rng.random_range(0..=max_minority);
        let majority = minority + margin;

        let (maj_pool, min_pool) = if label == 1 {
            (POSITIVE_WORDS.as_slice(), NEGATIVE_WORDS.as_slice())
        } else {
            (NEGATIVE_WORDS.as_slice(), POSITIVE_WORDS.as_slice())
        };
        let mut words: Vec<&str> = Vec::with_capacity(len);
        words.extend(pick(maj_pool, majority, &mut rng));
        words.extend(pick(min_pool, minority, &mut rng));
        words.extend(pick(&NEUTRAL_WORDS, len - majority - minority, &mut rng));
        words.shuffle(&mut rng);

        samples.push(LabeledSample {
            id: format!("sample-{idx:04}"),
            text_a: words.join(" "),
            text_b: None,
            gold_label: label,
            num_classes: 2,
        });
    }
    samples
}

fn pick<'a>(pool: &[&'a str], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let mut shuffled: Vec<&str> = pool.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(n);
    shuffled
}

/// Exhaustive single-token-substitution oracle: does replacing any one
/// content token with any other content word flip the model's decision?
///
/// Works directly on the model's forward pass, independent of the attack
/// engine and of any query accounting.
pub fn flipping_substitution_exists(
    sample: &LabeledSample,
    model: &dyn LocalModel,
) -> Result<bool> {
    let tokens = model.tokenize(&sample.text_a, sample.text_b.as_deref())?;
    for position in tokens.content_positions() {
        let original_id = tokens.token_ids[position];
        for id in 0..model.vocab_size() as u32 {
            if model.is_special_token_id(id) || id == original_id {
                continue;
            }
            let mut substituted = tokens.clone();
            substituted.token_ids[position] = id;
            let emb = model.embed(&substituted)?;
            let hidden = model.forward_hidden(&emb)?;
            let logits = model.task_logits(&hidden);
            if crate::model::argmax_lowest(&logits) != sample.gold_label {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Hand-written antonym fixture over the polarity vocabulary, used by tests
/// and the self-test suite.
pub fn polarity_antonym_lexicon() -> AntonymLexicon {
    let mut lex = AntonymLexicon::empty();
    for (a, b) in [
        ("good", "bad"),
        ("happy", "sad"),
        ("warm", "cold"),
        ("bright", "dark"),
        ("clean", "dirty"),
    ] {
        lex.insert_pair(a, b);
    }
    lex
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyModel;
    use std::collections::HashSet;

    #[test]
    fn corpus_is_deterministic_given_seed() {
        let spec = CorpusSpec { n_samples: 25, seed: 42, ..Default::default() };
        let a = generate_corpus(&spec);
        let b = generate_corpus(&spec);
        assert_eq!(a, b);
        let other = generate_corpus(&CorpusSpec { seed: 43, ..spec });
        assert_ne!(a, other);
    }

    #[test]
    fn corpus_lengths_and_labels_in_range() {
        let spec = CorpusSpec { n_samples: 200, seed: 1, ..Default::default() };
        for s in generate_corpus(&spec) {
            let words: Vec<&str> = s.text_a.split_whitespace().collect();
            assert!(words.len() >= spec.min_len && words.len() <= spec.max_len);
            assert!(s.gold_label < 2);
            // no duplicate words, which keeps substitution geometry clean
            let unique: HashSet<&str> = words.iter().copied().collect();
            assert_eq!(unique.len(), words.len());
        }
    }

    #[test]
    fn corpus_majority_matches_label() {
        let spec = CorpusSpec { n_samples: 100, seed: 9, ..Default::default() };
        for s in generate_corpus(&spec) {
            let pos = s
                .text_a
                .split_whitespace()
                .filter(|w| POSITIVE_WORDS.contains(w))
                .count() as i64;
            let neg = s
                .text_a
                .split_whitespace()
                .filter(|w| NEGATIVE_WORDS.contains(w))
                .count() as i64;
            if s.gold_label == 1 {
                assert!(pos > neg, "sample {}: {:?}", s.id, s.text_a);
            } else {
                assert!(neg > pos, "sample {}: {:?}", s.id, s.text_a);
            }
        }
    }

    #[test]
    fn corpus_tokenizes_under_tiny_model() {
        let m = TinyModel::new(0);
        for s in generate_corpus(&CorpusSpec { n_samples: 50, seed: 3, ..Default::default() }) {
            m.tokenize(&s.text_a, None).unwrap();
        }
    }

    #[test]
    fn oracle_finds_flip_on_margin_one_sentence() {
        let mut m = TinyModel::new(7);
        let train = generate_corpus(&CorpusSpec { n_samples: 60, seed: 5, ..Default::default() });
        m.fit_task_head(&train, 300, 0.5).unwrap();
        // margin-one sentence: 2 positive vs 1 negative
        let s = LabeledSample {
            id: "t".into(),
            text_a: "good great sad the movie".into(),
            text_b: None,
            gold_label: 1,
            num_classes: 2,
        };
        assert!(flipping_substitution_exists(&s, &m).unwrap());
    }
}
