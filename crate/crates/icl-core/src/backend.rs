//! The label-probability contract and its three implementations.
//!
//! A backend answers one question: given a prompt prefix and the verbalized
//! label continuations, what is the log-probability of each continuation?
//! Logprobs travel on the natural-log scale; conversion to bits happens in
//! the ranker, in one place.
//!
//! * [`MockBackend`] — hash-derived scores, pure and fast, for plumbing tests.
//! * [`SyntheticBackend`] — a similarity-vote oracle whose predictions depend
//!   on the context labels, so label-bias and ranking behavior can be
//!   exercised end to end without a real model.
//! * [`HttpBackend`] — echo/logprobs client for completion-style endpoints,
//!   with fixture recording and replay for offline runs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, EmbeddingMatrix};
use crate::error::BackendError;
use crate::rng::fnv1a64;

// ---------------------------------------------------------------------------
// Contract
// ---------------------------------------------------------------------------

/// What a demonstration contributed to the prefix: which pool example, and
/// the label word it was rendered with. Carried alongside the text so
/// synthetic backends never have to parse the prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoContext {
    pub example_id: String,
    pub word: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreContext {
    pub demos: Vec<DemoContext>,
    pub query_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelScoreRequest {
    pub prefix: String,
    /// One continuation per label, in label-space order.
    pub continuations: Vec<String>,
    pub context: Option<ScoreContext>,
}

impl LabelScoreRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.continuations.is_empty() {
            return Err(BackendError::InvalidRequest("no continuations".into()));
        }
        for (i, a) in self.continuations.iter().enumerate() {
            for b in &self.continuations[i + 1..] {
                if a == b {
                    return Err(BackendError::InvalidRequest(format!(
                        "duplicate continuation `{a}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Natural-log scores, aligned to the request's continuation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub logprobs: Vec<f64>,
}

impl LabelScores {
    /// Reject NaN and infinity so downstream math stays total.
    pub fn validated(self, expected_len: usize) -> Result<Self, BackendError> {
        if self.logprobs.len() != expected_len {
            return Err(BackendError::Malformed(format!(
                "expected {expected_len} logprobs, got {}",
                self.logprobs.len()
            )));
        }
        if let Some(index) = self.logprobs.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::NonFiniteScore { index });
        }
        Ok(self)
    }
}

/// The label-probability backend. Implementations must be deterministic
/// given their inputs and safe to call from many threads.
pub trait Backend: Send + Sync {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError>;

    fn name(&self) -> &str;

    /// Cheap health probe used by `validate`. Defaults to a one-off score.
    fn probe(&self) -> Result<(), BackendError> {
        let req = LabelScoreRequest {
            prefix: "probe:".into(),
            continuations: vec![" a".into(), " b".into()],
            context: None,
        };
        self.score_labels(&req).map(|_| ())
    }
}

/// Wraps a backend and counts calls; the eval harness reports the total.
pub struct CountingBackend<'a> {
    inner: &'a dyn Backend,
    calls: AtomicU64,
}

impl<'a> CountingBackend<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for CountingBackend<'_> {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.score_labels(req)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

// ---------------------------------------------------------------------------
// Mock
// ---------------------------------------------------------------------------

/// Deterministic test double: each (prefix, continuation) pair hashes to a
/// logprob in [-8, -0.1]. Pure function of its inputs.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockBackend;

impl MockBackend {
    /// The exact mapping, exposed so tests can recompute expectations.
    pub fn logprob_for(prefix: &str, continuation: &str) -> f64 {
        let mut bytes = Vec::with_capacity(prefix.len() + continuation.len() + 1);
        bytes.extend_from_slice(prefix.as_bytes());
        bytes.push(0x1f);
        bytes.extend_from_slice(continuation.as_bytes());
        let hash = fnv1a64(&bytes);
        // Top 53 bits -> uniform in [0, 1) -> [-8, -0.1).
        let unit = (hash >> 11) as f64 / (1u64 << 53) as f64;
        -8.0 + unit * 7.9
    }
}

impl Backend for MockBackend {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        req.validate()?;
        let logprobs = req
            .continuations
            .iter()
            .map(|c| Self::logprob_for(&req.prefix, c))
            .collect();
        LabelScores { logprobs }.validated(req.continuations.len())
    }

    fn name(&self) -> &str {
        "mock"
    }
}

// ---------------------------------------------------------------------------
// Synthetic
// ---------------------------------------------------------------------------

/// Similarity-vote oracle over synthetic embeddings.
///
/// Each continuation word collects the query-cosine mass of the context
/// demonstrations rendered with that word:
///
/// ```text
/// logprob(w) = ln(alpha + sum over demos rendered as w of cos(demo, query))
/// ```
///
/// Votes are keyed by the *rendered* word, so corrupting the demonstration
/// verbalizer reroutes evidence exactly the way a context-following model
/// would be misled. The inner sum is floored just above zero before the log
/// so scores stay finite in adversarial geometries.
pub struct SyntheticBackend {
    pool_index: Arc<EmbeddingMatrix>,
    query_index: Arc<EmbeddingMatrix>,
    alpha: f64,
}

impl SyntheticBackend {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn new(pool_index: Arc<EmbeddingMatrix>, query_index: Arc<EmbeddingMatrix>) -> Self {
        Self::with_alpha(pool_index, query_index, Self::DEFAULT_ALPHA)
    }

    pub fn with_alpha(
        pool_index: Arc<EmbeddingMatrix>,
        query_index: Arc<EmbeddingMatrix>,
        alpha: f64,
    ) -> Self {
        Self {
            pool_index,
            query_index,
            alpha,
        }
    }
}

impl Backend for SyntheticBackend {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        req.validate()?;
        let context = req.context.as_ref().ok_or_else(|| {
            BackendError::InvalidRequest("synthetic backend requires a score context".into())
        })?;
        let query = self
            .query_index
            .vector(&context.query_id)
            .or_else(|| self.pool_index.vector(&context.query_id))
            .ok_or_else(|| {
                BackendError::InvalidRequest(format!(
                    "no embedding for query `{}`",
                    context.query_id
                ))
            })?;
        let mut votes: HashMap<&str, f64> = HashMap::new();
        for demo in &context.demos {
            let emb = self.pool_index.vector(&demo.example_id).ok_or_else(|| {
                BackendError::InvalidRequest(format!("no embedding for demo `{}`", demo.example_id))
            })?;
            let sim =
                cosine(emb, query).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            *votes.entry(demo.word.as_str()).or_insert(0.0) += sim;
        }
        let logprobs = req
            .continuations
            .iter()
            .map(|c| {
                let word = c.trim_start();
                let mass = self.alpha + votes.get(word).copied().unwrap_or(0.0);
                mass.max(1e-12).ln()
            })
            .collect();
        LabelScores { logprobs }.validated(req.continuations.len())
    }

    fn name(&self) -> &str {
        "synthetic"
    }

    fn probe(&self) -> Result<(), BackendError> {
        if self.pool_index.is_empty() {
            return Err(BackendError::InvalidRequest(
                "synthetic backend has an empty pool index".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

/// Retry schedule for transient transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "duration_millis")]
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2,
        }
    }
}

mod duration_millis {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Bearer token; normally injected from an environment variable by the
    /// caller, never logged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Divide each continuation's summed logprob by its token count.
    #[serde(default)]
    pub length_normalize: bool,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Blocking completions client that scores continuations in echo mode.
///
/// One request per continuation: `POST {model, prompt: prefix+continuation,
/// max_tokens: 0, echo: true, logprobs: 1}`. The response must include
/// per-token `text_offset` and `token_logprobs` arrays. The client sums the
/// logprobs of exactly the continuation's tokens, identified by character
/// offsets: a token belongs to the continuation iff it extends past the end
/// of the prefix, so a token straddling the boundary is attributed to the
/// continuation in full.
pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpConfig,
    gate: InFlightGate,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build();
        Self {
            agent: agent_config.into(),
            gate: InFlightGate::new(config.max_in_flight.max(1)),
            config,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn score_one(&self, prefix: &str, continuation: &str) -> Result<f64, BackendError> {
        let prompt = format!("{prefix}{continuation}");
        let body = serde_json::json!({
            "model": self.config.model,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
        });
        let response = self.post_with_retry(&body)?;
        sum_continuation_logprobs(
            &response,
            prefix.chars().count(),
            self.config.length_normalize,
        )
    }

    fn post_with_retry(&self, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let mut delay = self.config.retry.base_delay;
        let mut last_transport = String::new();
        for attempt in 1..=self.config.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(delay);
                delay *= self.config.retry.factor;
            }
            let _slot = self.gate.acquire();
            log::trace!("backend request attempt {attempt}: {}", redacted(body));
            let mut request = self
                .agent
                .post(&self.config.endpoint)
                .header("content-type", "application/json");
            if let Some(token) = &self.config.auth_token {
                request = request.header("authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return response
                            .body_mut()
                            .read_json::<serde_json::Value>()
                            .map_err(|e| BackendError::Malformed(e.to_string()));
                    }
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    if status >= 500 {
                        // Server-side failure: worth retrying.
                        last_transport = format!("HTTP {status}: {text}");
                        continue;
                    }
                    let lowered = text.to_ascii_lowercase();
                    if lowered.contains("context length") || lowered.contains("maximum context") {
                        return Err(BackendError::ContextLengthExceeded { detail: text });
                    }
                    return Err(BackendError::Api {
                        status,
                        message: text,
                    });
                }
                Err(e) => {
                    last_transport = e.to_string();
                }
            }
        }
        Err(BackendError::Transport {
            message: last_transport,
            attempts: self.config.retry.max_attempts,
        })
    }
}

impl Backend for HttpBackend {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        req.validate()?;
        let logprobs = req
            .continuations
            .iter()
            .map(|c| self.score_one(&req.prefix, c))
            .collect::<Result<Vec<_>, _>>()?;
        LabelScores { logprobs }.validated(req.continuations.len())
    }

    fn name(&self) -> &str {
        "http"
    }
}

fn redacted(body: &serde_json::Value) -> String {
    // Payloads carry no secrets (the token lives in a header), but keep the
    // trace line bounded.
    let text = body.to_string();
    if text.len() > 400 {
        format!("{}...", &text[..400])
    } else {
        text
    }
}

/// Extract the continuation logprob sum from a completions-shaped response.
///
/// `prefix_chars` is the prefix length in Unicode scalar values, matching the
/// unit of the `text_offset` array. Token `i` with offset `o_i` and text
/// `t_i` is part of the continuation iff `o_i + chars(t_i) > prefix_chars`.
fn sum_continuation_logprobs(
    response: &serde_json::Value,
    prefix_chars: usize,
    length_normalize: bool,
) -> Result<f64, BackendError> {
    let logprobs = response
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("logprobs"))
        .ok_or_else(|| BackendError::Malformed("missing choices[0].logprobs".into()))?;
    let tokens = string_array(logprobs, "tokens")?;
    let offsets = number_array(logprobs, "text_offset")?;
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(|v| v.as_array())
        .ok_or_else(|| BackendError::Malformed("missing token_logprobs".into()))?;
    if tokens.len() != offsets.len() || tokens.len() != token_logprobs.len() {
        return Err(BackendError::Malformed(format!(
            "ragged logprob arrays: {} tokens, {} offsets, {} logprobs",
            tokens.len(),
            offsets.len(),
            token_logprobs.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((token, &offset), logprob) in tokens.iter().zip(&offsets).zip(token_logprobs) {
        let end = offset + token.chars().count();
        if end <= prefix_chars {
            continue;
        }
        let value = logprob.as_f64().ok_or_else(|| {
            BackendError::Malformed(format!("null logprob for continuation token `{token}`"))
        })?;
        if !value.is_finite() {
            return Err(BackendError::Malformed(format!(
                "non-finite logprob for token `{token}`"
            )));
        }
        sum += value;
        count += 1;
    }
    if count == 0 {
        return Err(BackendError::Malformed(
            "no tokens fell inside the continuation".into(),
        ));
    }
    if length_normalize {
        sum /= count as f64;
    }
    Ok(sum)
}

fn string_array(value: &serde_json::Value, key: &str) -> Result<Vec<String>, BackendError> {
    value
        .get(key)
        .and_then(|v| v.as_array())
        .map(|arr| {
            arr.iter()
                .map(|v| v.as_str().unwrap_or_default().to_string())
                .collect()
        })
        .ok_or_else(|| BackendError::Malformed(format!("missing {key}")))
}

fn number_array(value: &serde_json::Value, key: &str) -> Result<Vec<usize>, BackendError> {
    value
        .get(key)
        .and_then(|v| v.as_array())
        .map(|arr| {
            arr.iter()
                .map(|v| v.as_u64().unwrap_or(0) as usize)
                .collect()
        })
        .ok_or_else(|| BackendError::Malformed(format!("missing {key}")))
}

/// Counting semaphore bounding concurrent wire requests.
struct InFlightGate {
    state: Mutex<usize>,
    available: Condvar,
    limit: usize,
}

struct GateSlot<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self {
            state: Mutex::new(0),
            available: Condvar::new(),
            limit,
        }
    }

    fn acquire(&self) -> GateSlot<'_> {
        let mut in_flight = self.state.lock().expect("gate poisoned");
        while *in_flight >= self.limit {
            in_flight = self.available.wait(in_flight).expect("gate poisoned");
        }
        *in_flight += 1;
        GateSlot(self)
    }
}

impl Drop for GateSlot<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.0.state.lock().expect("gate poisoned");
        *in_flight -= 1;
        self.0.available.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Key for one scoring call: the FNV-1a hash of `model\x1fprefix\x1fcontinuation`.
pub fn request_hash(model: &str, prefix: &str, continuation: &str) -> u64 {
    let mut bytes = Vec::with_capacity(model.len() + prefix.len() + continuation.len() + 2);
    bytes.extend_from_slice(model.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(prefix.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(continuation.as_bytes());
    fnv1a64(&bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureRecord {
    request_hash: String,
    logprobs: Vec<f64>,
}

/// Replay backend: serves recorded per-continuation logprob sums keyed by
/// request hash. CI runs use this instead of a live endpoint.
pub struct FixtureBackend {
    model: String,
    entries: HashMap<u64, Vec<f64>>,
}

impl FixtureBackend {
    pub fn load(path: impl AsRef<Path>, model: impl Into<String>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(|e| BackendError::Fixture {
            path: display.clone(),
            message: e.to_string(),
        })?;
        let mut entries = HashMap::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Fixture {
                path: display.clone(),
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| BackendError::Fixture {
                    path: display.clone(),
                    message: format!("line {}: {e}", idx + 1),
                })?;
            let hash = u64::from_str_radix(&record.request_hash, 16).map_err(|e| {
                BackendError::Fixture {
                    path: display.clone(),
                    message: format!("line {}: bad hash: {e}", idx + 1),
                }
            })?;
            entries.insert(hash, record.logprobs);
        }
        Ok(Self {
            model: model.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for FixtureBackend {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        req.validate()?;
        let logprobs = req
            .continuations
            .iter()
            .map(|c| {
                let hash = request_hash(&self.model, &req.prefix, c);
                self.entries
                    .get(&hash)
                    .map(|values| values.iter().sum())
                    .ok_or(BackendError::FixtureMiss { hash })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        LabelScores { logprobs }.validated(req.continuations.len())
    }

    fn name(&self) -> &str {
        "fixture"
    }

    fn probe(&self) -> Result<(), BackendError> {
        if self.entries.is_empty() {
            return Err(BackendError::InvalidRequest("fixture file is empty".into()));
        }
        Ok(())
    }
}

/// Wraps any backend and records per-continuation results as fixture lines.
pub struct FixtureRecorder<'a> {
    inner: &'a dyn Backend,
    model: String,
    lines: Mutex<Vec<String>>,
}

impl<'a> FixtureRecorder<'a> {
    pub fn new(inner: &'a dyn Backend, model: impl Into<String>) -> Self {
        Self {
            inner,
            model: model.into(),
            lines: Mutex::new(Vec::new()),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), BackendError> {
        let path = path.as_ref();
        let lines = self.lines.lock().expect("recorder poisoned");
        std::fs::write(path, lines.join("\n") + "\n").map_err(|e| BackendError::Fixture {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

impl Backend for FixtureRecorder<'_> {
    fn score_labels(&self, req: &LabelScoreRequest) -> Result<LabelScores, BackendError> {
        let scores = self.inner.score_labels(req)?;
        let mut lines = self.lines.lock().expect("recorder poisoned");
        for (continuation, &logprob) in req.continuations.iter().zip(&scores.logprobs) {
            let record = FixtureRecord {
                request_hash: format!(
                    "{:016x}",
                    request_hash(&self.model, &req.prefix, continuation)
                ),
                logprobs: vec![logprob],
            };
            lines.push(serde_json::to_string(&record).expect("record serializes"));
        }
        Ok(scores)
    }

    fn name(&self) -> &str {
        "recorder"
    }
}
