//! Offline stand-ins for the chat-completions endpoint.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;
use sha2::{Digest, Sha256};

use crate::client::{completion_body, HttpRequest, HttpResponse, Transport, TransportFailure};
use crate::schemas::PredictorKind;

/// A schema-valid analysis payload for `kind` carrying `prediction`.
pub fn mock_analysis_json(kind: PredictorKind, prediction: f64) -> String {
    let value = match kind {
        PredictorKind::TextOnly => json!({
            "cognitive_task_type": "retrieve_value",
            "question_clarity": 4,
            "information_integration_level": 2,
            "option_count": 4,
            "correct_answer_text": null,
            "distractor_plausibility": 3,
            "format_consistency": 4,
            "prediction": prediction,
        }),
        PredictorKind::VisionOnly => json!({
            "chart_type": "bar chart",
            "axis_clarity": 4,
            "encoding_clarity": 4,
            "readability": 4,
            "clutter_level": 2,
            "data_series_count": 1,
            "annotations_present": false,
            "visual_complexity": 2,
            "prediction": prediction,
        }),
        PredictorKind::Multimodal => json!({
            "visual_summary": "simple bar chart",
            "textual_demands": "single value lookup",
            "option_quality": "distinct options",
            "interaction_notes": "question maps directly onto one bar",
            "prediction": prediction,
        }),
    };
    value.to_string()
}

/// Replays a fixed script of responses in order and records what was sent.
/// Once the script runs out every call gets HTTP 500.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<HttpResponse, TransportFailure>>>,
    sent: Mutex<Vec<HttpRequest>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<HttpResponse, TransportFailure>>) -> Self {
        Self { script: Mutex::new(script.into()), sent: Mutex::new(Vec::new()) }
    }

    /// Script of successful completions with the given message contents.
    pub fn with_contents<I, S>(contents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(contents.into_iter().map(|c| Ok(HttpResponse::ok(completion_body(c.as_ref())))).collect())
    }

    pub fn push(&self, response: Result<HttpResponse, TransportFailure>) {
        self.script.lock().unwrap().push_back(response);
    }

    pub fn calls(&self) -> usize {
        self.sent.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.sent.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportFailure> {
        self.sent.lock().unwrap().push(request.clone());
        self.script.lock().unwrap().pop_front().unwrap_or_else(|| Ok(HttpResponse::status(500)))
    }
}

pub fn body_digest(body: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(body));
    out
}

/// Answers each request by looking up the SHA-256 of its body. Unknown
/// bodies get HTTP 404. Safe for concurrent use; counts calls.
#[derive(Debug, Default)]
pub struct FixtureTransport {
    responses: HashMap<[u8; 32], String>,
    calls: AtomicUsize,
}

impl FixtureTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register the message content to return for a request body.
    pub fn insert(&mut self, request_body: &[u8], content: String) {
        self.responses.insert(body_digest(request_body), content);
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for FixtureTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportFailure> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(match self.responses.get(&body_digest(&request.body)) {
            Some(content) => HttpResponse::ok(completion_body(content)),
            None => HttpResponse::status(404),
        })
    }
}
