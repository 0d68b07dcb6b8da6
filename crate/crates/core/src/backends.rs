//! Clients for the external inference services plus a table-driven mock.
//!
//! Two services are consumed over a minimal JSON-over-HTTP contract:
//!
//! * completion: `POST {"model", "prompt", "temperature"}` answered by `{"text"}`
//! * classifier: `POST {"premise", "hypothesis"}` answered by `{"label", "scores": [r, n, c]}`
//!
//! A [`Backend`] pairs one service with its [`BackendConfig`] and owns the retry policy.
//! Only transport failures are retried; a non-2xx answer is a protocol error right away.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::model::{Document, ResonanceLabel, Scores, ThemeOrigin, Verdict};
use crate::resonance::map_nli_label;
use crate::themeio::{build_extraction_prompt, parse_theme_output, ParsedExtraction};

/// Classifier score triples may deviate from unit mass by this much before being renormalized.
pub const WIRE_SCORE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    /// Whole-request timeout in seconds; `None` means no cap.
    pub timeout_secs: Option<f64>,
    pub parallelism: usize,
    /// Name of the environment variable holding a bearer token.
    pub auth_token_env: Option<String>,
    /// Base delay between retries, doubled after each failed attempt.
    pub retry_backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: String::new(),
            model_name: String::new(),
            temperature: 1.0,
            max_retries: 2,
            timeout_secs: None,
            parallelism: 8,
            auth_token_env: None,
            retry_backoff_ms: 200,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.parallelism == 0 {
            return Err(BackendError::InvalidArgument("parallelism must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::InvalidArgument("temperature must be >= 0".into()));
        }
        if let Some(t) = self.timeout_secs {
            if !(t.is_finite() && t > 0.0) {
                return Err(BackendError::InvalidArgument("timeout must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self, BackendError> {
        let config: BackendConfig =
            toml::from_str(s).map_err(|e| BackendError::InvalidArgument(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Protocol { status: Option<u16>, message: String },
}

/// Failure of a single request attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum CallError {
    /// Connection-level failure; retried.
    Transport(String),
    Protocol { status: Option<u16>, message: String },
}

pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub temperature: f64,
    /// Raw text the prompt was built from. Not sent on the wire.
    pub input_text: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawClassification {
    pub label: String,
    pub scores: Vec<f64>,
}

pub trait InferenceService: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, CallError>;
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<RawClassification, CallError>;
}

pub struct HttpService {
    endpoint: String,
    agent: ureq::Agent,
    token: Option<String>,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionReply {
    text: String,
}

#[derive(Serialize)]
struct ClassifyBody<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

impl HttpService {
    pub fn new(config: &BackendConfig) -> Result<Self, BackendError> {
        if config.endpoint.is_empty() {
            return Err(BackendError::InvalidArgument("endpoint is not configured".into()));
        }
        let token = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::InvalidArgument(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(config.timeout_secs.map(Duration::from_secs_f64))
            .build()
            .into();
        Ok(HttpService {
            endpoint: config.endpoint.clone(),
            agent,
            token,
        })
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, body: &B) -> Result<R, CallError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| CallError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(CallError::Protocol {
                status: Some(status),
                message: text,
            });
        }
        response.body_mut().read_json::<R>().map_err(|e| CallError::Protocol {
            status: Some(status),
            message: format!("malformed response body: {e}"),
        })
    }
}

impl InferenceService for HttpService {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, CallError> {
        let reply: CompletionReply = self.post(&CompletionBody {
            model: request.model,
            prompt: request.prompt,
            temperature: request.temperature,
        })?;
        Ok(reply.text)
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<RawClassification, CallError> {
        self.post(&ClassifyBody { premise, hypothesis })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockJudgment {
    pub premise: String,
    pub hypothesis: String,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockPair {
    pub premise: String,
    pub hypothesis: String,
}

/// Fixture-driven answers for offline runs.
///
/// Classification falls through: injected failure, table entry, self-pair (Resonance),
/// then `default_label`. Completions for unknown inputs are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockTable {
    /// SHA-256 hex of the input text to completion text.
    pub completions: BTreeMap<String, String>,
    pub judgments: Vec<MockJudgment>,
    pub default_label: ResonanceLabel,
    /// Pairs that always fail at the transport level.
    pub failures: Vec<MockPair>,
    /// Upper bound on a per-pair deterministic delay, to shuffle completion timing.
    pub jitter_ms: u64,
}

impl Default for MockTable {
    fn default() -> Self {
        MockTable {
            completions: BTreeMap::new(),
            judgments: Vec::new(),
            default_label: ResonanceLabel::Neutral,
            failures: Vec::new(),
            jitter_ms: 0,
        }
    }
}

impl MockTable {
    pub fn insert_completion(&mut self, input_text: &str, completion: impl Into<String>) {
        self.completions
            .insert(sha256_hex(input_text.as_bytes()), completion.into());
    }

    pub fn insert_verdict(&mut self, premise: &str, hypothesis: &str, verdict: Verdict) {
        self.judgments.retain(|j| !(j.premise == premise && j.hypothesis == hypothesis));
        self.judgments.push(MockJudgment {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            verdict,
        });
    }

    pub fn insert_label(&mut self, premise: &str, hypothesis: &str, label: ResonanceLabel) {
        self.insert_verdict(premise, hypothesis, Verdict::one_hot(label));
    }

    pub fn insert_failure(&mut self, premise: &str, hypothesis: &str) {
        self.failures.push(MockPair {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
        });
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        for j in &self.judgments {
            if !j.verdict.is_consistent() {
                return Err(BackendError::InvalidArgument(format!(
                    "mock judgment for ({:?}, {:?}) is not argmax-consistent",
                    j.premise, j.hypothesis
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidArgument(format!("{}: {e}", path.display())))?;
        let table: MockTable = serde_json::from_str(&raw)
            .map_err(|e| BackendError::InvalidArgument(format!("{}: {e}", path.display())))?;
        table.validate()?;
        Ok(table)
    }

    pub fn lookup(&self, premise: &str, hypothesis: &str) -> Verdict {
        if let Some(j) = self
            .judgments
            .iter()
            .find(|j| j.premise == premise && j.hypothesis == hypothesis)
        {
            return j.verdict;
        }
        if premise.trim() == hypothesis.trim() {
            return Verdict::one_hot(ResonanceLabel::Resonance);
        }
        Verdict::one_hot(self.default_label)
    }
}

pub struct MockService {
    table: MockTable,
    calls: AtomicUsize,
}

impl MockService {
    pub fn new(table: MockTable) -> Self {
        MockService {
            table,
            calls: AtomicUsize::new(0),
        }
    }

    /// Requests received so far, failed ones included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn jitter(&self, key: &str) {
        if self.table.jitter_ms == 0 {
            return;
        }
        let digest = sha256_hex(key.as_bytes());
        let n = u64::from_str_radix(&digest[..8], 16).unwrap_or(0);
        thread::sleep(Duration::from_millis(n % (self.table.jitter_ms + 1)));
    }
}

impl InferenceService for MockService {
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.jitter(request.input_text);
        let key = sha256_hex(request.input_text.as_bytes());
        Ok(self.table.completions.get(&key).cloned().unwrap_or_default())
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<RawClassification, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.jitter(&format!("{premise}\u{0}{hypothesis}"));
        if self
            .table
            .failures
            .iter()
            .any(|f| f.premise == premise && f.hypothesis == hypothesis)
        {
            return Err(CallError::Transport("injected failure".into()));
        }
        let verdict = self.table.lookup(premise, hypothesis);
        Ok(RawClassification {
            label: verdict.label.as_str().to_string(),
            scores: verdict.scores.as_array().to_vec(),
        })
    }
}

/// Turns a wire classification into a locally consistent verdict.
pub fn normalize_classification(raw: &RawClassification) -> Result<Verdict, BackendError> {
    let protocol = |message: String| BackendError::Protocol {
        status: None,
        message,
    };
    map_nli_label(&raw.label).map_err(|e| protocol(e.to_string()))?;
    let [r, n, c]: [f64; 3] = raw
        .scores
        .as_slice()
        .try_into()
        .map_err(|_| protocol(format!("expected 3 scores, got {}", raw.scores.len())))?;
    if [r, n, c].iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(protocol(format!("invalid scores {:?}", raw.scores)));
    }
    let mass = r + n + c;
    if mass <= 0.0 {
        return Err(protocol(format!("scores {:?} carry no mass", raw.scores)));
    }
    let scores = Scores::from([r / mass, n / mass, c / mass]);
    Ok(Verdict::from_scores(scores))
}

/// Runs `f` over `items` with at most `parallelism` calls in flight; output is index-aligned.
pub fn fan_out<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

#[derive(Clone)]
pub struct Backend {
    service: Arc<dyn InferenceService>,
    config: BackendConfig,
}

impl Backend {
    pub fn new(service: Arc<dyn InferenceService>, config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Backend { service, config })
    }

    pub fn http(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let service = HttpService::new(&config)?;
        Backend::new(Arc::new(service), config)
    }

    /// Mock backend with model name "mock" and no retry delay.
    pub fn mock(table: MockTable) -> Self {
        let config = BackendConfig {
            model_name: "mock".into(),
            retry_backoff_ms: 0,
            ..BackendConfig::default()
        };
        Backend {
            service: Arc::new(MockService::new(table)),
            config,
        }
    }

    pub fn with_config(mut self, config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        self.config = config;
        Ok(self)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, CallError>) -> Result<T, BackendError> {
        let max_attempts = 1 + self.config.max_retries;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Ok(v) => return Ok(v),
                Err(CallError::Protocol { status, message }) => {
                    return Err(BackendError::Protocol { status, message })
                }
                Err(CallError::Transport(message)) => {
                    if attempt >= max_attempts {
                        return Err(BackendError::Unavailable {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!("attempt {attempt}/{max_attempts} failed: {message}");
                    let delay = self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                }
            }
        }
    }

    /// Prompts the completion service for themes of one document.
    pub fn extract_themes(&self, document: &Document) -> Result<ParsedExtraction, BackendError> {
        let prompt = build_extraction_prompt(&document.text)
            .map_err(|e| BackendError::InvalidArgument(format!("document {}: {e}", document.id)))?;
        let request = CompletionRequest {
            model: &self.config.model_name,
            prompt: &prompt.text,
            temperature: self.config.temperature,
            input_text: &document.text,
        };
        let completion = self.with_retries(|| self.service.complete(&request))?;
        let mut parsed = parse_theme_output(&completion);
        for theme in &mut parsed.themes {
            theme.origin = ThemeOrigin::Extracted {
                document_id: document.id.clone(),
                extractor_id: self.config.model_name.clone(),
            };
        }
        Ok(parsed)
    }

    pub fn extract_corpus(&self, documents: &[Document]) -> Vec<Result<ParsedExtraction, BackendError>> {
        fan_out(documents, self.config.parallelism, |d| self.extract_themes(d))
    }

    pub fn classify_pair(&self, premise: &str, hypothesis: &str) -> Result<Verdict, BackendError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidArgument(
                "premise and hypothesis must be non-empty".into(),
            ));
        }
        let raw = self.with_retries(|| self.service.classify(premise, hypothesis))?;
        normalize_classification(&raw)
    }

    /// Classifies every pair; results are aligned with the input and failures stay per-item.
    pub fn classify_batch(&self, pairs: &[(String, String)]) -> Vec<Result<Verdict, BackendError>> {
        fan_out(pairs, self.config.parallelism, |(p, h)| self.classify_pair(p, h))
    }
}
