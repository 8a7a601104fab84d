//! HTTP JSON clients for the two external services (error generator and
//! verifier) plus deterministic fixtures and a disk-caching wrapper for
//! offline runs and tests.
//!
//! Endpoint and credentials come from the environment:
//! `ERRORGEN_ENDPOINT` / `ERRORGEN_API_KEY` for the generator,
//! `VERIFIER_ENDPOINT` / `VERIFIER_API_KEY` for the verifier.

use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("response violates the expected schema: {0}")]
    Schema(String),
    #[error("cache I/O failure: {0}")]
    Cache(String),
}

/// Bounded exponential backoff for transient failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_delay_ms: 250,
            max_delay_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_delay_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }

    /// Run `op`, retrying on `Unavailable` up to `max_retries` times.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ClientError>,
    ) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(ClientError::Unavailable(msg)) if attempt < self.max_retries => {
                    tracing::warn!(attempt, "service unavailable, retrying: {msg}");
                    thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

// ── Error-generator service ─────────────────────────────────────────────────

/// Produces an erroneous reasoning trace for a rendered instruction prompt.
pub trait ErrorGenerator: Send + Sync {
    /// Raw trace text; invariant validation happens in the caller.
    fn request_trace(&self, question_id: &str, prompt: &str) -> Result<String, ClientError>;
    /// Provenance string recorded with each injected error.
    fn provenance(&self) -> String;
}

#[derive(Serialize)]
struct ErrorGenRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct ErrorGenResponse {
    trace: String,
}

/// POSTs `{model, prompt}` and expects `{trace}` back.
pub struct HttpErrorGenerator {
    endpoint: String,
    api_key: String,
    model: String,
    retry: RetryPolicy,
}

impl HttpErrorGenerator {
    pub fn new(endpoint: String, api_key: String, model: String) -> Self {
        Self {
            endpoint,
            api_key,
            model,
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env(model: String) -> Result<Self, ClientError> {
        let endpoint = std::env::var("ERRORGEN_ENDPOINT")
            .map_err(|_| ClientError::Auth("ERRORGEN_ENDPOINT not set".into()))?;
        let api_key = std::env::var("ERRORGEN_API_KEY").unwrap_or_default();
        Ok(Self::new(endpoint, api_key, model))
    }
}

impl ErrorGenerator for HttpErrorGenerator {
    fn request_trace(&self, _question_id: &str, prompt: &str) -> Result<String, ClientError> {
        self.retry.run(|| {
            let body = ErrorGenRequest {
                model: &self.model,
                prompt,
            };
            let mut response = ureq::post(&self.endpoint)
                .header("authorization", &format!("Bearer {}", self.api_key))
                .send_json(&body)
                .map_err(classify_ureq_error)?;
            let parsed: ErrorGenResponse = response
                .body_mut()
                .read_json()
                .map_err(|e| ClientError::Schema(e.to_string()))?;
            Ok(parsed.trace)
        })
    }

    fn provenance(&self) -> String {
        format!("http:{}", self.model)
    }
}

/// Deterministic offline generator: derives a plausible two-step trace with
/// one wrong arithmetic fact from the question text alone, so rebuilding a
/// dataset is byte-stable.
pub struct FixtureErrorGenerator;

impl ErrorGenerator for FixtureErrorGenerator {
    fn request_trace(&self, question_id: &str, prompt: &str) -> Result<String, ClientError> {
        // Two small operands derived from a stable hash of the id; the stated
        // product is off by one, and the trace stops right after it.
        let digest = sha2_hex(question_id.as_bytes());
        let a = 2 + (u64::from_str_radix(&digest[..2], 16).unwrap_or(0) % 7);
        let b = 3 + (u64::from_str_radix(&digest[2..4], 16).unwrap_or(0) % 8);
        let wrong = a * b + 1;
        let _ = prompt;
        Ok(format!(
            "Okay, so first I need to work out the key quantity in this problem.\n\nLet me multiply {a} × {b} = {wrong}."
        ))
    }

    fn provenance(&self) -> String {
        "fixture".to_string()
    }
}

/// Wraps any generator with a per-question disk cache so rebuilding a dataset
/// replays recorded responses instead of calling the service again.
pub struct CachingErrorGenerator<G> {
    inner: G,
    dir: PathBuf,
}

impl<G: ErrorGenerator> CachingErrorGenerator<G> {
    pub fn new(inner: G, dir: PathBuf) -> Result<Self, ClientError> {
        std::fs::create_dir_all(&dir).map_err(|e| ClientError::Cache(e.to_string()))?;
        Ok(Self { inner, dir })
    }
}

impl<G: ErrorGenerator> ErrorGenerator for CachingErrorGenerator<G> {
    fn request_trace(&self, question_id: &str, prompt: &str) -> Result<String, ClientError> {
        let key = sha2_hex(format!("{question_id}\u{0}{prompt}").as_bytes());
        let path = self.dir.join(format!("{key}.txt"));
        if path.exists() {
            return std::fs::read_to_string(&path).map_err(|e| ClientError::Cache(e.to_string()));
        }
        let trace = self.inner.request_trace(question_id, prompt)?;
        std::fs::write(&path, &trace).map_err(|e| ClientError::Cache(e.to_string()))?;
        Ok(trace)
    }

    fn provenance(&self) -> String {
        format!("cached:{}", self.inner.provenance())
    }
}

// ── Verifier service ────────────────────────────────────────────────────────

/// Request body sent to the verifier service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub question: String,
    pub candidate_text: String,
    pub ground_truth: String,
}

#[derive(Deserialize)]
struct VerifierResponse {
    correct: bool,
}

/// Grades a candidate text against the ground truth.
pub trait VerifierClient: Send + Sync {
    fn verify(&self, request: &VerifyRequest) -> Result<bool, ClientError>;
}

/// POSTs the request and expects `{correct: bool}` back.
pub struct HttpVerifier {
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

impl HttpVerifier {
    pub fn new(endpoint: String, api_key: String) -> Self {
        Self {
            endpoint,
            api_key,
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env() -> Result<Self, ClientError> {
        let endpoint = std::env::var("VERIFIER_ENDPOINT")
            .map_err(|_| ClientError::Auth("VERIFIER_ENDPOINT not set".into()))?;
        let api_key = std::env::var("VERIFIER_API_KEY").unwrap_or_default();
        Ok(Self::new(endpoint, api_key))
    }
}

impl VerifierClient for HttpVerifier {
    fn verify(&self, request: &VerifyRequest) -> Result<bool, ClientError> {
        self.retry.run(|| {
            let mut response = ureq::post(&self.endpoint)
                .header("authorization", &format!("Bearer {}", self.api_key))
                .send_json(request)
                .map_err(classify_ureq_error)?;
            let parsed: VerifierResponse = response
                .body_mut()
                .read_json()
                .map_err(|e| ClientError::Schema(e.to_string()))?;
            Ok(parsed.correct)
        })
    }
}

/// Always unavailable, which routes every verdict through the deterministic
/// boxed-match fallback. The default for offline runs.
pub struct OfflineVerifier;

impl VerifierClient for OfflineVerifier {
    fn verify(&self, _request: &VerifyRequest) -> Result<bool, ClientError> {
        Err(ClientError::Unavailable("offline verifier".into()))
    }
}

/// Fixture verifier answering from a closure; used in tests.
pub struct FnVerifier<F>(pub F);

impl<F: Fn(&VerifyRequest) -> Result<bool, ClientError> + Send + Sync> VerifierClient
    for FnVerifier<F>
{
    fn verify(&self, request: &VerifyRequest) -> Result<bool, ClientError> {
        (self.0)(request)
    }
}

fn classify_ureq_error(err: ureq::Error) -> ClientError {
    match err {
        ureq::Error::StatusCode(code) if code == 401 || code == 403 => {
            ClientError::Auth(format!("status {code}"))
        }
        other => ClientError::Unavailable(other.to_string()),
    }
}

pub(crate) fn sha2_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
