use std::collections::BTreeMap;
use std::time::Duration;

use lara_core::Grade;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::extract::{extract_grade_probs, Completion, GradeTokens, TokenPosition};
use crate::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_tokens: usize,
    /// Forwarded to endpoints that support seeded sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            top_k: 50,
            max_tokens: 1,
            seed: None,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self, max_grade: Grade) -> Result<(), LlmError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LlmError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k < max_grade as usize + 1 {
            return Err(LlmError::Config(format!(
                "top_k {} cannot cover grades 0..={max_grade}",
                self.top_k
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, ClientError>;

    fn model_id(&self) -> &str {
        ""
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            attempts: 3,
            initial_delay: Duration::ZERO,
        }
    }
}

/// Completes with exponential backoff on transient failures.
pub fn complete_with_retry<C: CompletionClient + ?Sized>(
    client: &C,
    prompt: &str,
    config: &DecodingConfig,
    retry: &RetryPolicy,
) -> Result<Completion, LlmError> {
    let mut delay = retry.initial_delay;
    let mut last = String::new();
    for attempt in 0..retry.attempts.max(1) {
        if attempt > 0 && !delay.is_zero() {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match client.complete(prompt, config) {
            Ok(c) => return Ok(c),
            Err(ClientError::Transient(e)) => last = e,
            Err(ClientError::Fatal(e)) => return Err(LlmError::BadResponse(e)),
        }
    }
    Err(LlmError::EndpointUnreachable(last))
}

/// Raw per-grade masses for one prompt.
pub fn fetch_grade_probs<C: CompletionClient + ?Sized>(
    client: &C,
    config: &DecodingConfig,
    prompt: &str,
    tokens: &GradeTokens,
    answer_marker: Option<&str>,
    retry: &RetryPolicy,
) -> Result<BTreeMap<Grade, f64>, LlmError> {
    let completion = complete_with_retry(client, prompt, config, retry)?;
    extract_grade_probs(&completion, tokens, answer_marker)
}

/// Blocking client for the OpenAI-compatible `/v1/completions` shape with
/// `logprobs`.
pub struct OpenAiClient {
    endpoint: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            agent,
        }
    }

    pub fn request_body(&self, prompt: &str, config: &DecodingConfig) -> Value {
        let mut body = json!({
            "model": self.model,
            "prompt": prompt,
            "max_tokens": config.max_tokens,
            "temperature": config.temperature,
            "top_k": config.top_k,
            "logprobs": config.top_k,
        });
        if let Some(seed) = config.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

impl CompletionClient for OpenAiClient {
    fn complete(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, ClientError> {
        let body = self.request_body(prompt, config).to_string();
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body.as_str()).map_err(|e| ClientError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&text).map_err(ClientError::Fatal),
            408 | 429 | 500..=599 => Err(ClientError::Transient(format!("HTTP {status}"))),
            _ => Err(ClientError::Fatal(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()))),
        }
    }

    fn model_id(&self) -> &str {
        &self.model
    }
}

/// Parses `choices[0].logprobs.{tokens, top_logprobs}`.
pub fn parse_completion(text: &str) -> Result<Completion, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let lp = v
        .pointer("/choices/0/logprobs")
        .filter(|l| !l.is_null())
        .ok_or("response has no logprobs")?;
    let tokens = lp.get("tokens").and_then(Value::as_array).ok_or("logprobs.tokens missing")?;
    let empty = Vec::new();
    let tops = lp.get("top_logprobs").and_then(Value::as_array).unwrap_or(&empty);
    let positions = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let top = tops
                .get(i)
                .and_then(Value::as_object)
                .map(|m: &Map<String, Value>| {
                    m.iter()
                        .filter_map(|(k, v)| v.as_f64().map(|lp| (k.clone(), lp)))
                        .collect()
                })
                .unwrap_or_default();
            TokenPosition {
                token: t.as_str().unwrap_or_default().to_string(),
                top_logprobs: top,
            }
        })
        .collect();
    Ok(Completion { positions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        fail: usize,
        calls: AtomicUsize,
        err: ClientError,
    }

    impl CompletionClient for Flaky {
        fn complete(&self, _: &str, _: &DecodingConfig) -> Result<Completion, ClientError> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail {
                return Err(self.err.clone());
            }
            Ok(Completion {
                positions: vec![TokenPosition {
                    token: "1".into(),
                    top_logprobs: vec![("1".into(), 0.5f64.ln()), ("0".into(), 0.25f64.ln())],
                }],
            })
        }
    }

    #[test]
    fn retries_then_succeeds_or_gives_up() {
        let tokens = GradeTokens::digits(1);
        let cfg = DecodingConfig::default();
        let c = Flaky { fail: 2, calls: AtomicUsize::new(0), err: ClientError::Transient("down".into()) };
        let m = fetch_grade_probs(&c, &cfg, "p", &tokens, None, &RetryPolicy::immediate()).unwrap();
        assert!((m[&1] - 0.5).abs() < 1e-12);
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);

        let c = Flaky { fail: 3, calls: AtomicUsize::new(0), err: ClientError::Transient("down".into()) };
        let e = fetch_grade_probs(&c, &cfg, "p", &tokens, None, &RetryPolicy::immediate()).unwrap_err();
        assert!(matches!(e, LlmError::EndpointUnreachable(_)));
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);

        let c = Flaky { fail: 1, calls: AtomicUsize::new(0), err: ClientError::Fatal("401".into()) };
        assert!(matches!(
            fetch_grade_probs(&c, &cfg, "p", &tokens, None, &RetryPolicy::immediate()),
            Err(LlmError::BadResponse(_))
        ));
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn decoding_validation() {
        let d = DecodingConfig::default();
        assert_eq!((d.temperature, d.top_k), (3.0, 50));
        assert!(d.validate(3).is_ok());
        assert!(DecodingConfig { top_k: 2, ..d.clone() }.validate(2).is_err());
        assert!(DecodingConfig { temperature: 0.0, ..d.clone() }.validate(1).is_err());
        assert!(DecodingConfig { max_tokens: 0, ..d }.validate(1).is_err());
    }

    #[test]
    fn parses_openai_shape() {
        let body = r#"{"choices":[{"text":" 1","logprobs":{"tokens":[" 1"],"token_logprobs":[-0.4],
            "top_logprobs":[{" 1":-0.4," 0":-1.2,"1":-3.0}]}}]}"#;
        let c = parse_completion(body).unwrap();
        assert_eq!(c.positions.len(), 1);
        assert_eq!(c.positions[0].top_logprobs.len(), 3);
        assert!(parse_completion(r#"{"choices":[{"text":"x","logprobs":null}]}"#).is_err());
        assert!(parse_completion("nope").is_err());
    }

    #[test]
    fn request_carries_decoding() {
        let c = OpenAiClient::new("http://localhost:1/v1/completions", "m", None);
        let b = c.request_body("hi", &DecodingConfig::default());
        assert_eq!(b["temperature"], 3.0);
        assert_eq!(b["top_k"], 50);
        assert_eq!(b["logprobs"], 50);
        assert_eq!(b["model"], "m");
        assert!(b.get("seed").is_none());
        let b = c.request_body("hi", &DecodingConfig { seed: Some(9), ..Default::default() });
        assert_eq!(b["seed"], 9);
    }
}
