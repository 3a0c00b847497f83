//! Automatic evaluation: attack success rate, mean similarity, and the
//! grammar-error/perplexity increase of adversarial samples, aggregated
//! into one report row per dataset-victim cell.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::reconstruct::SentenceScorer;
use crate::types::{AttackOutcome, LabeledSample};
use crate::{Error, Result};

/// How quality metrics are aggregated; recorded in every report document.
pub const AGGREGATION_NOTE: &str =
    "quality metrics (similarity, grammar, perplexity deltas) averaged over successful attacks only; ASR over all attempts";

/// Pluggable text-quality backends. Absent backends yield `None`-valued
/// report fields, never fabricated numbers.
#[derive(Default)]
pub struct QualityScorer {
    grammar: Option<Box<dyn Fn(&str) -> usize + Send + Sync>>,
    perplexity: Option<Box<dyn Fn(&str) -> f64 + Send + Sync>>,
}

impl QualityScorer {
    /// No backends configured.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_grammar(mut self, f: impl Fn(&str) -> usize + Send + Sync + 'static) -> Self {
        self.grammar = Some(Box::new(f));
        self
    }

    pub fn with_perplexity(mut self, f: impl Fn(&str) -> f64 + Send + Sync + 'static) -> Self {
        self.perplexity = Some(Box::new(f));
        self
    }

    /// Desk-scale default: unigram perplexity estimated from reference
    /// texts with add-one smoothing.
    pub fn with_unigram_perplexity<'a>(self, reference: impl IntoIterator<Item = &'a str>) -> Self {
        let lm = UnigramModel::fit(reference);
        self.with_perplexity(move |text| lm.perplexity(text))
    }

    pub fn has_grammar(&self) -> bool {
        self.grammar.is_some()
    }

    pub fn has_perplexity(&self) -> bool {
        self.perplexity.is_some()
    }
}

/// Add-one-smoothed unigram language model over whitespace tokens.
#[derive(Debug, Clone)]
pub struct UnigramModel {
    counts: HashMap<String, usize>,
    total: usize,
}

impl UnigramModel {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut total = 0;
        for text in texts {
            for word in text.split_whitespace() {
                *counts.entry(word.to_lowercase()).or_default() += 1;
                total += 1;
            }
        }
        Self { counts, total }
    }

    fn prob(&self, word: &str) -> f64 {
        // one extra type reserved for unseen words
        let vocab = self.counts.len() + 1;
        let count = self.counts.get(&word.to_lowercase()).copied().unwrap_or(0);
        (count + 1) as f64 / (self.total + vocab) as f64
    }

    /// exp of the mean negative log-probability; 1.0 for empty text.
    pub fn perplexity(&self, text: &str) -> f64 {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return 1.0;
        }
        let nll: f64 = words.iter().map(|w| -self.prob(w).ln()).sum();
        (nll / words.len() as f64).exp()
    }
}

/// Proportion of successful attacks, in percent.
pub fn attack_success_rate(outcomes: &[AttackOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let successes = outcomes.iter().filter(|o| o.success).count();
    Ok(100.0 * successes as f64 / outcomes.len() as f64)
}

/// Grammar-error increase from original to adversarial text. Negative when
/// the adversarial text has fewer errors.
pub fn delta_grammar(original: &str, adversarial: &str, scorer: &QualityScorer) -> Result<i64> {
    let grammar = scorer
        .grammar
        .as_ref()
        .ok_or(Error::ScorerUnavailable("grammar"))?;
    Ok(grammar(adversarial) as i64 - grammar(original) as i64)
}

/// Perplexity increase from original to adversarial text.
pub fn delta_perplexity(original: &str, adversarial: &str, scorer: &QualityScorer) -> Result<f64> {
    let ppl = scorer
        .perplexity
        .as_ref()
        .ok_or(Error::ScorerUnavailable("perplexity"))?;
    Ok(ppl(adversarial) - ppl(original))
}

/// Aggregated evaluation over one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub asr_percent: f64,
    pub mean_similarity: Option<f64>,
    pub delta_grammar_errors: Option<f64>,
    pub delta_perplexity: Option<f64>,
    pub n_samples: usize,
    pub per_sample: Vec<AttackOutcome>,
}

/// Machine-readable report document: one object per dataset-victim cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub victim: String,
    pub local_model: String,
    pub n_samples: usize,
    pub asr_percent: f64,
    pub mean_similarity: Option<f64>,
    pub delta_grammar_errors: Option<f64>,
    pub delta_perplexity: Option<f64>,
    pub aggregation: String,
}

impl ReportRow {
    pub fn from_report(
        report: &MetricsReport,
        dataset: &str,
        victim: &str,
        local_model: &str,
    ) -> Self {
        Self {
            dataset: dataset.to_string(),
            victim: victim.to_string(),
            local_model: local_model.to_string(),
            n_samples: report.n_samples,
            asr_percent: report.asr_percent,
            mean_similarity: report.mean_similarity,
            delta_grammar_errors: report.delta_grammar_errors,
            delta_perplexity: report.delta_perplexity,
            aggregation: AGGREGATION_NOTE.to_string(),
        }
    }

    /// Aligned-column text table with one header and one value row.
    pub fn render_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".to_string(),
        };
        let headers = ["dataset", "victim", "n", "ASR%", "USE", "dI", "dPPL"];
        let values = [
            self.dataset.clone(),
            self.victim.clone(),
            self.n_samples.to_string(),
            format!("{:.2}", self.asr_percent),
            fmt_opt(self.mean_similarity),
            fmt_opt(self.delta_grammar_errors),
            fmt_opt(self.delta_perplexity),
        ];
        let widths: Vec<usize> = headers
            .iter()
            .zip(&values)
            .map(|(h, v)| h.len().max(v.len()))
            .collect();
        let render_row = |cells: &[String]| {
            let joined = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ");
            format!("{}\n", joined.trim_end())
        };
        let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        format!("{}{}", render_row(&header_cells), render_row(&values))
    }
}

/// Build the aggregated report.
///
/// Outcomes are ordered by sample id before any floating-point accumulation,
/// which makes the aggregation invariant to input permutation and bitwise
/// reproducible. Quality metrics cover successful attacks only; scorer
/// errors and absent backends surface as `None` fields.
pub fn build_report(
    outcomes: &[AttackOutcome],
    originals: &[LabeledSample],
    quality: &QualityScorer,
    similarity_fallback: Option<&dyn SentenceScorer>,
) -> Result<MetricsReport> {
    let mut ordered: Vec<AttackOutcome> = outcomes.to_vec();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let asr_percent = attack_success_rate(&ordered)?;
    let by_id: HashMap<&str, &LabeledSample> =
        originals.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut sims = MeanAcc::default();
    let mut grams = MeanAcc::default();
    let mut ppls = MeanAcc::default();

    for outcome in ordered.iter().filter(|o| o.success) {
        let adversarial = outcome
            .adversarial_text
            .as_deref()
            .expect("successful outcome carries adversarial text");
        let original = by_id.get(outcome.sample_id.as_str());

        let sim = outcome.final_similarity.or_else(|| {
            similarity_fallback.and_then(|scorer| {
                original.and_then(|s| scorer.score(&rendered(s), adversarial).ok())
            })
        });
        if let Some(sim) = sim {
            sims.push(sim);
        }

        if let Some(s) = original {
            let orig_text = rendered(s);
            if quality.has_grammar() {
                if let Ok(d) = delta_grammar(&orig_text, adversarial, quality) {
                    grams.push(d as f64);
                }
            }
            if quality.has_perplexity() {
                if let Ok(d) = delta_perplexity(&orig_text, adversarial, quality) {
                    ppls.push(d);
                }
            }
        }
    }

    Ok(MetricsReport {
        asr_percent,
        mean_similarity: sims.mean(),
        delta_grammar_errors: grams.mean(),
        delta_perplexity: ppls.mean(),
        n_samples: ordered.len(),
        per_sample: ordered,
    })
}

fn rendered(sample: &LabeledSample) -> String {
    match &sample.text_b {
        Some(b) => format!("{} ||| {}", sample.text_a, b),
        None => sample.text_a.clone(),
    }
}

#[derive(Default)]
struct MeanAcc {
    sum: f64,
    count: usize,
}

impl MeanAcc {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}
