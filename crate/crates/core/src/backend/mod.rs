//! Uniform access to language models: chat generation and sequence scoring.
//!
//! Three implementations sit behind [`Backend`]: an OpenAI-compatible HTTP
//! client, a seeded synthetic responder used for calibration, and a
//! record/replay cache that can wrap either.

mod cache;
mod http;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::rng::sha256_hex;

pub use cache::{CacheEntry, CacheMode, CachedBackend, CachedResponse, ReplayCache};
pub use http::{HttpBackend, RetryPolicy};
pub use synthetic::{GradingLaw, PersonaRates, SalaryLaw, ScoringLaw, SyntheticBackend, SyntheticProfile};

/// Default completion budgets: a letter, a Yes/No, a "$N".
pub const MAX_TOKENS_EXP1: u32 = 8;
pub const MAX_TOKENS_EXP2: u32 = 4;
pub const MAX_TOKENS_EXP3: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated identical prompts; part of the cache key, never of the prompt.
    pub trial_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRequest {
    pub model: String,
    pub text: String,
}

/// Anything that can be cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CacheRequest {
    Generate(GenerationRequest),
    Score(ScoringRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub logprob: f64,
    #[serde(default)]
    pub special: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub tokens: Vec<TokenScore>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("no cached response for {key} in strict replay mode")]
    CacheMiss { key: String },
    #[error("backend {0} cannot score sequences")]
    NoScoring(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unrecognized prompt shape")]
    UnrecognizedPrompt,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("cache i/o on {path}: {message}")]
    Cache { path: String, message: String },
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
}

/// Digest of the canonical JSON form of a request. Keys are sorted, so the
/// digest is identical on every platform.
pub fn cache_key(request: &CacheRequest) -> String {
    let canonical = to_canonical_string(request).expect("requests serialize");
    sha256_hex(canonical.as_bytes())
}

pub trait Backend: Send + Sync {
    /// Stable name recorded alongside cached responses.
    fn id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    fn score_sequence(&self, model: &str, text: &str) -> Result<TokenScores, BackendError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }

    fn score_sequence(&self, model: &str, text: &str) -> Result<TokenScores, BackendError> {
        (**self).score_sequence(model, text)
    }
}
