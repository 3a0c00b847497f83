//! Dataset ingestion and correct-classification screening.
//!
//! Canonical ingest is JSON-lines `{"text_a", "text_b"?, "label"}` with an
//! optional `"id"`; tab-separated files with the same columns are accepted
//! as well. Malformed lines are rejected with their line number.

use std::io::BufRead;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::LabeledSample;
use crate::victim::VictimClient;
use crate::{Error, Result};

/// Text layout of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextFormat {
    SingleText,
    TextPair,
}

/// Where a dataset lives and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    pub format: TextFormat,
    pub source_path: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonLine {
    id: Option<String>,
    text_a: String,
    text_b: Option<String>,
    label: usize,
}

/// Load and validate every sample in the file.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    let file = std::fs::File::open(&spec.source_path)
        .map_err(|_| Error::MissingFile(spec.source_path.display().to_string()))?;
    let reader = std::io::BufReader::new(file);

    let mut samples = Vec::new();
    let mut json_mode: Option<bool> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        // sniff the layout on the first data line
        let json = *json_mode.get_or_insert_with(|| trimmed.starts_with('{'));
        let sample = if json {
            parse_json_line(trimmed, line_no, spec)?
        } else {
            parse_tsv_line(trimmed, line_no, spec)?
        };
        sample.validate().map_err(|e| Error::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

fn parse_json_line(line: &str, line_no: usize, spec: &DatasetSpec) -> Result<LabeledSample> {
    let parsed: JsonLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        detail: e.to_string(),
    })?;
    build_sample(
        parsed.id,
        parsed.text_a,
        parsed.text_b,
        parsed.label,
        line_no,
        spec,
    )
}

fn parse_tsv_line(line: &str, line_no: usize, spec: &DatasetSpec) -> Result<LabeledSample> {
    let fields: Vec<&str> = line.split('\t').collect();
    let expected = match spec.format {
        TextFormat::SingleText => 2,
        TextFormat::TextPair => 3,
    };
    if fields.len() != expected {
        return Err(Error::Parse {
            line: line_no,
            detail: format!("expected {expected} tab-separated fields, got {}", fields.len()),
        });
    }
    let label: usize = fields[expected - 1].trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        detail: format!("label `{}` is not an integer", fields[expected - 1]),
    })?;
    let text_b = (spec.format == TextFormat::TextPair).then(|| fields[1].to_string());
    build_sample(None, fields[0].to_string(), text_b, label, line_no, spec)
}

fn build_sample(
    id: Option<String>,
    text_a: String,
    text_b: Option<String>,
    label: usize,
    line_no: usize,
    spec: &DatasetSpec,
) -> Result<LabeledSample> {
    match spec.format {
        TextFormat::TextPair if text_b.is_none() => {
            return Err(Error::Parse {
                line: line_no,
                detail: "pair-format dataset requires text_b".into(),
            })
        }
        TextFormat::SingleText if text_b.is_some() => {
            return Err(Error::Parse {
                line: line_no,
                detail: "single-text dataset must not carry text_b".into(),
            })
        }
        _ => {}
    }
    if label >= spec.num_classes {
        return Err(Error::Parse {
            line: line_no,
            detail: format!("label {label} outside 0..{}", spec.num_classes),
        });
    }
    Ok(LabeledSample {
        id: id.unwrap_or_else(|| format!("line-{line_no:06}")),
        text_a,
        text_b,
        gold_label: label,
        num_classes: spec.num_classes,
    })
}

/// Uniformly sample `n` samples the victim classifies correctly.
///
/// Screening queries go through the supplied client, which the caller
/// budgets separately from any attack session.
pub fn sample_correct(
    samples: &[LabeledSample],
    victim: &mut VictimClient,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledSample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut selected = Vec::with_capacity(n);
    for idx in order {
        if selected.len() == n {
            break;
        }
        let s = &samples[idx];
        let decision = victim.classify(&s.text_a, s.text_b.as_deref())?;
        if decision.predicted_label == s.gold_label {
            selected.push(s.clone());
        }
    }
    if selected.len() < n {
        return Err(Error::InsufficientCorrect {
            available: selected.len(),
            requested: n,
        });
    }
    Ok(selected)
}

/// Keep every sample the victim classifies correctly, in input order.
pub fn screen_all(
    samples: &[LabeledSample],
    victim: &mut VictimClient,
) -> Result<Vec<LabeledSample>> {
    let mut selected = Vec::new();
    for s in samples {
        let decision = victim.classify(&s.text_a, s.text_b.as_deref())?;
        if decision.predicted_label == s.gold_label {
            selected.push(s.clone());
        }
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Decision;
    use crate::victim::DecisionAdapter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;
    use std::sync::Arc;

    fn spec(path: &std::path::Path, format: TextFormat, classes: usize) -> DatasetSpec {
        DatasetSpec {
            name: "fixture".into(),
            num_classes: classes,
            format,
            source_path: path.to_path_buf(),
        }
    }

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn jsonl_fixture_loads_three_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "d.jsonl",
            concat!(
                "{\"text_a\": \"good movie\", \"label\": 0}\n",
                "{\"text_a\": \"bad movie\", \"label\": 1}\n",
                "{\"id\": \"x\", \"text_a\": \"calm day\", \"label\": 0}\n",
            ),
        );
        let samples = load_dataset(&spec(&path, TextFormat::SingleText, 2)).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].id, "line-000001");
        assert_eq!(samples[2].id, "x");
        assert_eq!(samples[1].gold_label, 1);
    }

    #[test]
    fn label_out_of_range_is_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "d.jsonl",
            "{\"text_a\": \"good\", \"label\": 0}\n{\"text_a\": \"bad\", \"label\": 5}\n",
        );
        match load_dataset(&spec(&path, TextFormat::SingleText, 2)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pair_spec_requires_text_b() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "d.jsonl", "{\"text_a\": \"premise only\", \"label\": 1}\n");
        match load_dataset(&spec(&path, TextFormat::TextPair, 3)) {
            Err(Error::Parse { line, detail }) => {
                assert_eq!(line, 1);
                assert!(detail.contains("text_b"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_single_and_pair_layouts_load() {
        let dir = tempfile::tempdir().unwrap();
        let single = write_file(&dir, "s.tsv", "good movie\t0\nbad movie\t1\n");
        let samples = load_dataset(&spec(&single, TextFormat::SingleText, 2)).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].text_a, "good movie");

        let pair = write_file(&dir, "p.tsv", "premise words\thypothesis words\t2\n");
        let samples = load_dataset(&spec(&pair, TextFormat::TextPair, 3)).unwrap();
        assert_eq!(samples[0].text_b.as_deref(), Some("hypothesis words"));
        assert_eq!(samples[0].gold_label, 2);
    }

    #[test]
    fn tsv_wrong_column_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "s.tsv", "text only no label\n");
        assert!(matches!(
            load_dataset(&spec(&path, TextFormat::SingleText, 2)),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn missing_file_reported() {
        let path = PathBuf::from("/nonexistent/nope.jsonl");
        assert!(matches!(
            load_dataset(&spec(&path, TextFormat::SingleText, 2)),
            Err(Error::MissingFile(_))
        ));
    }

    /// Victim that classifies by looking at the first word.
    struct FirstWordVictim;

    impl DecisionAdapter for FirstWordVictim {
        fn name(&self) -> &str {
            "first-word"
        }
        fn decide(&self, text_a: &str, _b: Option<&str>) -> crate::Result<Decision> {
            let label = usize::from(text_a.starts_with("good"));
            Ok(Decision { predicted_label: label })
        }
    }

    fn corpus(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| LabeledSample {
                id: format!("s{i:03}"),
                text_a: if i % 2 == 0 { "good stuff" } else { "bad stuff" }.into(),
                text_b: None,
                gold_label: usize::from(i % 2 == 0),
                num_classes: 2,
            })
            .collect()
    }

    #[test]
    fn screening_returns_n_gold_consistent_samples() {
        let samples = corpus(100);
        let mut client = VictimClient::new(Arc::new(FirstWordVictim), samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let picked = sample_correct(&samples, &mut client, 10, &mut rng).unwrap();
        assert_eq!(picked.len(), 10);
        for s in &picked {
            let d = FirstWordVictim.decide(&s.text_a, None).unwrap();
            assert_eq!(d.predicted_label, s.gold_label);
        }
    }

    #[test]
    fn always_wrong_victim_yields_insufficient() {
        struct AlwaysWrong;
        impl DecisionAdapter for AlwaysWrong {
            fn name(&self) -> &str {
                "wrong"
            }
            fn decide(&self, _a: &str, _b: Option<&str>) -> crate::Result<Decision> {
                Ok(Decision { predicted_label: 1 })
            }
        }
        let samples: Vec<LabeledSample> = corpus(20)
            .into_iter()
            .map(|mut s| {
                s.gold_label = 0;
                s
            })
            .collect();
        let mut client = VictimClient::new(Arc::new(AlwaysWrong), samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        match sample_correct(&samples, &mut client, 5, &mut rng) {
            Err(Error::InsufficientCorrect { available, requested }) => {
                assert_eq!((available, requested), (0, 5));
            }
            other => panic!("expected insufficiency, got {other:?}"),
        }
    }

    #[test]
    fn half_accurate_victim_selection_replays_correct() {
        // victim is right only on even ids (gold matches first word there)
        struct HalfVictim;
        impl DecisionAdapter for HalfVictim {
            fn name(&self) -> &str {
                "half"
            }
            fn decide(&self, text_a: &str, _b: Option<&str>) -> crate::Result<Decision> {
                // wrong on every "bad ..." sample
                let label = usize::from(text_a.starts_with("good"));
                Ok(Decision { predicted_label: label ^ usize::from(text_a.starts_with("bad")) })
            }
        }
        let samples = corpus(100);
        let mut client = VictimClient::new(Arc::new(HalfVictim), samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let picked = sample_correct(&samples, &mut client, 20, &mut rng).unwrap();
        assert_eq!(picked.len(), 20);
        // replay every decision from the log against the gold labels
        for s in &picked {
            let d = HalfVictim.decide(&s.text_a, None).unwrap();
            assert_eq!(d.predicted_label, s.gold_label, "sample {}", s.id);
        }
    }

    #[test]
    fn screening_consumes_separate_budget() {
        let samples = corpus(10);
        let mut client = VictimClient::new(Arc::new(FirstWordVictim), samples.len());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let _ = sample_correct(&samples, &mut client, 3, &mut rng).unwrap();
        assert!(client.queries_made() >= 3);
        assert!(client.queries_made() <= samples.len());
    }
}
