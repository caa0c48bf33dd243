use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, BackendError, GenerationRequest, TokenScores};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            base_delay_ms: 1000,
            max_delay_ms: 30_000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), capped and optionally jittered to [50%, 100%].
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64.checked_shl(attempt).unwrap_or(u64::MAX));
        let capped = exp.min(self.max_delay_ms);
        let ms = if self.jitter {
            let f: f64 = rand::thread_rng().gen_range(0.5..=1.0);
            (capped as f64 * f) as u64
        } else {
            capped
        };
        Duration::from_millis(ms)
    }
}

/// OpenAI-compatible chat client plus the minimal `/score` contract.
///
/// `POST {base}/chat/completions` with `{model, messages, temperature, max_tokens}`;
/// `POST {base}/score` with `{model, text}` answering `{tokens: [{text, logprob, special}]}`.
pub struct HttpBackend {
    id: String,
    base_url: String,
    api_key: Option<String>,
    scoring: bool,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

const BODY_EXCERPT: usize = 300;

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, base_url: impl Into<String>, api_key: Option<String>) -> Self {
        HttpBackend {
            id: id.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            scoring: false,
            retry: RetryPolicy::default(),
            agent: ureq::AgentBuilder::new()
                .timeout_connect(Duration::from_secs(10))
                .timeout(Duration::from_secs(120))
                .build(),
        }
    }

    pub fn with_scoring(mut self, enabled: bool) -> Self {
        self.scoring = enabled;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Exact JSON body sent for a generation request.
    pub fn chat_body(request: &GenerationRequest) -> serde_json::Value {
        json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Attempt<serde_json::Value> {
        let mut req = self
            .agent
            .post(&format!("{}{}", self.base_url, path))
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => match resp.into_json::<serde_json::Value>() {
                Ok(v) => Attempt::Done(v),
                // a truncated body is a transport problem, not a content one
                Err(e) => Attempt::Retry(format!("reading body: {e}")),
            },
            Err(ureq::Error::Status(status, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if status == 429 || status >= 500 {
                    Attempt::Retry(format!("HTTP {status}"))
                } else {
                    Attempt::Fail(BackendError::Rejected {
                        status,
                        body: text.chars().take(BODY_EXCERPT).collect(),
                    })
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(t.to_string()),
        }
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.post_once(path, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => {
                    last = msg;
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts,
            message: last,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let value = self.post("/chat/completions", &Self::chat_body(request))?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))
    }

    fn score_sequence(&self, model: &str, text: &str) -> Result<TokenScores, BackendError> {
        if !self.scoring {
            return Err(BackendError::NoScoring(self.id.clone()));
        }
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let value = self.post("/score", &json!({"model": model, "text": text}))?;
        let scores: TokenScores =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        if scores.tokens.is_empty() {
            return Err(BackendError::MalformedResponse("empty token list".into()));
        }
        Ok(scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_has_exactly_documented_fields() {
        let req = GenerationRequest {
            model: "gpt".into(),
            system: "sys".into(),
            user: "usr".into(),
            temperature: 0.1,
            max_tokens: 8,
            trial_index: 4,
        };
        let body = HttpBackend::chat_body(&req);
        let mut keys: Vec<&String> = body.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["max_tokens", "messages", "model", "temperature"]);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
    }

    #[test]
    fn delays_grow_and_cap() {
        let p = RetryPolicy {
            attempts: 5,
            base_delay_ms: 1000,
            max_delay_ms: 5000,
            jitter: false,
        };
        let ms: Vec<u128> = (0..5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(ms, [1000, 2000, 4000, 5000, 5000]);
        let j = RetryPolicy { jitter: true, ..p };
        for a in 0..5 {
            let d = j.delay(a).as_millis();
            assert!(d >= ms[a as usize] / 2 && d <= ms[a as usize]);
        }
    }

    #[test]
    fn scoring_disabled_is_a_capability_error() {
        let b = HttpBackend::new("x", "http://127.0.0.1:9", None);
        assert!(matches!(b.score_sequence("m", "text"), Err(BackendError::NoScoring(_))));
    }
}
