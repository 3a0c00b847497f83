//! Decision-only black-box access to victim models with strict query
//! budgeting.
//!
//! Adapters return [`Decision`] and nothing else; there is no field through
//! which a confidence score could leak. One client serves one attack
//! session; the counter and log are session-local.

use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::LocalModel;
use crate::types::Decision;
use crate::{Error, Result};

/// Anything that can answer a classification query with a bare label.
pub trait DecisionAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, text_a: &str, text_b: Option<&str>) -> Result<Decision>;
}

/// One recorded victim query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text_a: String,
    pub text_b: Option<String>,
    pub decision: Decision,
    pub timestamp: DateTime<Utc>,
}

impl QueryRecord {
    /// Rendered single-string form of the queried text.
    pub fn display_text(&self) -> String {
        match &self.text_b {
            Some(b) => format!("{} ||| {}", self.text_a, b),
            None => self.text_a.clone(),
        }
    }
}

/// Budgeted, logged access to a victim adapter.
pub struct VictimClient {
    adapter: Arc<dyn DecisionAdapter>,
    budget: usize,
    queries_made: usize,
    log: Vec<QueryRecord>,
}

impl VictimClient {
    pub fn new(adapter: Arc<dyn DecisionAdapter>, budget: usize) -> Self {
        Self {
            adapter,
            budget,
            queries_made: 0,
            log: Vec::new(),
        }
    }

    pub fn adapter_name(&self) -> &str {
        self.adapter.name()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn queries_made(&self) -> usize {
        self.queries_made
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.queries_made
    }

    /// Query the victim for a decision. The counter increments exactly once
    /// per successful call and not at all when the adapter fails before
    /// producing a decision.
    pub fn classify(&mut self, text_a: &str, text_b: Option<&str>) -> Result<Decision> {
        if self.queries_made >= self.budget {
            return Err(Error::BudgetExhausted {
                used: self.queries_made,
                budget: self.budget,
            });
        }
        let decision = self.adapter.decide(text_a, text_b)?;
        self.queries_made += 1;
        self.log.push(QueryRecord {
            text_a: text_a.to_string(),
            text_b: text_b.map(str::to_string),
            decision,
            timestamp: Utc::now(),
        });
        Ok(decision)
    }

    /// Append-only record of all classify calls, in call order.
    pub fn query_log(&self) -> &[QueryRecord] {
        &self.log
    }
}

/// Victim backed by a local model running in-process. Only the argmax label
/// crosses this boundary; logits never leave the adapter.
pub struct InProcessVictim {
    model: Arc<dyn LocalModel>,
    name: String,
}

impl InProcessVictim {
    pub fn new(model: Arc<dyn LocalModel>) -> Self {
        let name = format!("inproc:{}", model.name());
        Self { model, name }
    }
}

impl DecisionAdapter for InProcessVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn decide(&self, text_a: &str, text_b: Option<&str>) -> Result<Decision> {
        self.model.classify_text(text_a, text_b)
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    text_a: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_b: Option<&'a str>,
}

/// Response schema of the remote victim protocol. `deny_unknown_fields`
/// makes a payload carrying scores a hard error rather than something to
/// silently strip.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifyResponse {
    label: usize,
}

/// Victim behind an HTTP endpoint: one POST per query, request
/// `{"text_a", "text_b"?}`, response `{"label"}`.
pub struct RemoteVictim {
    url: String,
    num_classes: usize,
    client: reqwest::blocking::Client,
    attempts: usize,
    backoff: Duration,
}

impl RemoteVictim {
    pub fn new(url: impl Into<String>, num_classes: usize, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::RemoteUnavailable {
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(Self {
            url: url.into(),
            num_classes,
            client,
            attempts: 3,
            backoff: Duration::from_millis(100),
        })
    }

    /// Shrink the retry backoff (tests exercising the failure path).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post_once(&self, text_a: &str, text_b: Option<&str>) -> Result<Decision> {
        let resp = self
            .client
            .post(&self.url)
            .json(&ClassifyRequest { text_a, text_b })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::RemoteUnavailable {
                attempts: 1,
                detail: e.to_string(),
            })?;
        let body: ClassifyResponse = resp.json().map_err(|e| Error::RemoteUnavailable {
            attempts: 1,
            detail: format!("bad response payload: {e}"),
        })?;
        Decision::checked(body.label, self.num_classes)
    }
}

impl DecisionAdapter for RemoteVictim {
    fn name(&self) -> &str {
        &self.url
    }

    fn decide(&self, text_a: &str, text_b: Option<&str>) -> Result<Decision> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            match self.post_once(text_a, text_b) {
                Ok(d) => return Ok(d),
                Err(Error::LabelOutOfRange { label, num_classes }) => {
                    return Err(Error::LabelOutOfRange { label, num_classes })
                }
                Err(e) => last = e.to_string(),
            }
            if attempt + 1 < self.attempts {
                std::thread::sleep(self.backoff * 2u32.pow(attempt as u32));
            }
        }
        Err(Error::RemoteUnavailable {
            attempts: self.attempts,
            detail: last,
        })
    }
}

/// Resolve a victim spec string: `inproc:tiny:SEED`, `inproc:PATH`, or
/// `http(s)://...`. The `GRADTEXT_VICTIM_URL` environment variable, when
/// set, overrides any remote URL.
pub fn load_victim_adapter(spec: &str, num_classes: usize) -> Result<Arc<dyn DecisionAdapter>> {
    let spec = match std::env::var("GRADTEXT_VICTIM_URL") {
        Ok(url) if spec.starts_with("http") => url,
        _ => spec.to_string(),
    };
    if let Some(inner) = spec.strip_prefix("inproc:") {
        let model = crate::model::load_local_model(inner)?;
        return Ok(Arc::new(InProcessVictim::new(model)));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Arc::new(RemoteVictim::new(
            spec,
            num_classes,
            Duration::from_secs(10),
        )?));
    }
    Err(Error::MalformedCheckpoint(format!(
        "victim spec `{spec}` is neither inproc:... nor an http(s) URL"
    )))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyModel;
    use crate::types::LabeledSample;

    fn trained_tiny() -> Arc<TinyModel> {
        let mut m = TinyModel::new(7);
        let samples = vec![
            LabeledSample {
                id: "s0".into(),
                text_a: "good great movie".into(),
                text_b: None,
                gold_label: 1,
                num_classes: 2,
            },
            LabeledSample {
                id: "s1".into(),
                text_a: "bad awful movie".into(),
                text_b: None,
                gold_label: 0,
                num_classes: 2,
            },
        ];
        m.fit_task_head(&samples, 200, 0.5).unwrap();
        Arc::new(m)
    }

    #[test]
    fn in_process_victim_classifies_training_point() {
        let adapter = InProcessVictim::new(trained_tiny());
        let mut client = VictimClient::new(Arc::new(adapter), 10);
        let d = client.classify("good great movie", None).unwrap();
        assert_eq!(d.predicted_label, 1);
        let d = client.classify("bad awful movie", None).unwrap();
        assert_eq!(d.predicted_label, 0);
    }

    #[test]
    fn second_call_past_budget_fails() {
        let adapter = InProcessVictim::new(trained_tiny());
        let mut client = VictimClient::new(Arc::new(adapter), 1);
        client.classify("good movie", None).unwrap();
        match client.classify("bad movie", None) {
            Err(Error::BudgetExhausted { used, budget }) => {
                assert_eq!((used, budget), (1, 1));
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
        assert_eq!(client.queries_made(), 1);
    }

    #[test]
    fn query_log_preserves_call_order() {
        let adapter = InProcessVictim::new(trained_tiny());
        let mut client = VictimClient::new(Arc::new(adapter), 10);
        client.classify("good movie", None).unwrap();
        client.classify("bad movie", None).unwrap();
        client.classify("calm day", Some("dark night")).unwrap();
        let log = client.query_log();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0].text_a, "good movie");
        assert_eq!(log[1].text_a, "bad movie");
        assert_eq!(log[2].display_text(), "calm day ||| dark night");
        assert!(log[0].timestamp <= log[2].timestamp);
    }

    #[test]
    fn remote_adapter_passes_label_through() {
        let url = stub_server::serve_n(1, r#"{"label": 2}"#);
        let victim = RemoteVictim::new(url, 4, Duration::from_secs(2)).unwrap();
        let d = victim.decide("some text", None).unwrap();
        assert_eq!(d.predicted_label, 2);
    }

    #[test]
    fn remote_adapter_rejects_score_bearing_payload() {
        let url = stub_server::serve_n(3, r#"{"label": 1, "score": 0.93}"#);
        let victim = RemoteVictim::new(url, 4, Duration::from_secs(2)).unwrap()
            .with_backoff(Duration::from_millis(1));
        match victim.decide("text", None) {
            Err(Error::RemoteUnavailable { detail, .. }) => {
                assert!(detail.contains("payload"), "unexpected detail: {detail}");
            }
            other => panic!("expected schema rejection, got {other:?}"),
        }
    }

    #[test]
    fn remote_adapter_rejects_out_of_range_label() {
        let url = stub_server::serve_n(1, r#"{"label": 9}"#);
        let victim = RemoteVictim::new(url, 4, Duration::from_secs(2)).unwrap();
        assert!(matches!(
            victim.decide("text", None),
            Err(Error::LabelOutOfRange { label: 9, .. })
        ));
    }

    #[test]
    fn transport_failure_retries_then_fails_without_consuming_budget() {
        // bind then drop: connection refused on every attempt
        let url = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            format!("http://{}", l.local_addr().unwrap())
        };
        let victim = RemoteVictim::new(url, 2, Duration::from_millis(200))
            .unwrap()
            .with_backoff(Duration::from_millis(1));
        let mut client = VictimClient::new(Arc::new(victim), 5);
        match client.classify("text", None) {
            Err(Error::RemoteUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected remote failure, got {other:?}"),
        }
        assert_eq!(client.queries_made(), 0);
        assert!(client.query_log().is_empty());
    }

    #[test]
    fn victim_spec_resolution() {
        assert!(load_victim_adapter("inproc:tiny:3", 2).is_ok());
        assert!(load_victim_adapter("http://127.0.0.1:1/x", 2).is_ok());
        assert!(load_victim_adapter("carrier-pigeon:coo", 2).is_err());
    }
}
