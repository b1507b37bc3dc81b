//! OpenAI-compatible HTTP backend over `/v1/completions`.
//!
//! Generation posts a completion request; loglikelihood scoring reuses the
//! same route with `echo` + `logprobs`, summing the echoed token logprobs
//! that fall inside the continuation. Servers that do not return logprobs
//! surface [`BackendError::Unsupported`] so evaluation fails loudly instead
//! of silently approximating scores.
//!
//! Retry contract: at most `max_retries + 1` attempts, retrying only on
//! timeouts and 429/5xx statuses, with exponential backoff (base 250 ms,
//! factor 2, cap 4 s) plus jitter.

use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{
    Backend, BackendError, FinishReason, GenerationRequest, GenerationResult,
    LoglikelihoodRequest, LoglikelihoodResult,
};
use crate::util::Semaphore;

/// Exponential backoff schedule. The defaults are part of the retry
/// contract; tests may shrink them to keep suites fast.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub base_ms: u64,
    pub factor: u32,
    pub cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_ms: 250,
            factor: 2,
            cap_ms: 4_000,
        }
    }
}

impl RetryPolicy {
    /// Jittered delay before the retry following failed attempt `attempt`
    /// (0-based). Equal jitter: half the exponential step plus a uniform
    /// half-step.
    fn delay(&self, attempt: u32) -> Duration {
        let step = self
            .base_ms
            .saturating_mul(u64::from(self.factor).saturating_pow(attempt))
            .min(self.cap_ms);
        let jitter = (rand::random::<f64>() * (step as f64 / 2.0)) as u64;
        Duration::from_millis(step / 2 + jitter)
    }
}

const DEFAULT_INFLIGHT_CAP: usize = 4;

pub struct HttpBackend {
    id: String,
    base_url: String,
    model_name: String,
    api_key: Option<String>,
    timeout: Duration,
    max_retries: u32,
    policy: RetryPolicy,
    inflight: Semaphore,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(
        id: impl Into<String>,
        base_url: impl Into<String>,
        model_name: impl Into<String>,
        api_key: Option<String>,
        timeout_ms: u64,
        max_retries: u32,
    ) -> Self {
        Self {
            id: id.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model_name: model_name.into(),
            api_key,
            timeout: Duration::from_millis(timeout_ms.max(1)),
            max_retries,
            policy: RetryPolicy::default(),
            inflight: Semaphore::new(DEFAULT_INFLIGHT_CAP),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_retry_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_inflight_cap(mut self, cap: usize) -> Self {
        self.inflight = Semaphore::new(cap);
        self
    }

    /// POST `payload` to the completions route, following the retry
    /// contract. Returns the parsed JSON body of the successful response.
    pub fn call_with_retry(&self, payload: &Value) -> Result<(Value, u32), BackendError> {
        let _permit = self.inflight.acquire();
        let url = format!("{}/v1/completions", self.base_url);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let mut request = self
                .client
                .post(&url)
                .timeout(self.timeout)
                .header("content-type", "application/json");
            if let Some(key) = &self.api_key {
                request = request.header("authorization", format!("Bearer {key}"));
            }
            let outcome = request.json(payload).send();

            let retryable_failure = match outcome {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let body = response.text().map_err(|err| BackendError::Protocol {
                            backend_id: self.id.clone(),
                            status: Some(status.as_u16()),
                            message: format!("failed reading body: {err}"),
                        })?;
                        let value = serde_json::from_str(&body).map_err(|err| {
                            BackendError::Protocol {
                                backend_id: self.id.clone(),
                                status: Some(status.as_u16()),
                                message: format!("invalid JSON body: {err}; body: {}", body_excerpt(&body)),
                            }
                        })?;
                        return Ok((value, attempts));
                    }
                    let code = status.as_u16();
                    let retryable = code == 429 || (500..600).contains(&code);
                    let body = response.text().unwrap_or_default();
                    let error = BackendError::Protocol {
                        backend_id: self.id.clone(),
                        status: Some(code),
                        message: body_excerpt(&body),
                    };
                    if !retryable {
                        return Err(error);
                    }
                    error
                }
                Err(err) if err.is_timeout() => BackendError::Timeout {
                    backend_id: self.id.clone(),
                    attempts,
                },
                Err(err) => {
                    // Connection-level failures are not in the retryable set.
                    return Err(BackendError::Protocol {
                        backend_id: self.id.clone(),
                        status: None,
                        message: err.to_string(),
                    });
                }
            };

            if attempts > self.max_retries {
                return Err(match retryable_failure {
                    BackendError::Timeout { backend_id, .. } => BackendError::Timeout {
                        backend_id,
                        attempts,
                    },
                    other => other,
                });
            }
            std::thread::sleep(self.policy.delay(attempts - 1));
        }
    }

    fn generation_payload(&self, req: &GenerationRequest) -> Value {
        let params = &req.params;
        let mut payload = json!({
            "model": self.model_name,
            "prompt": req.prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
        });
        if params.top_k > 0 {
            payload["top_k"] = json!(params.top_k);
        }
        if !params.stop.is_empty() {
            payload["stop"] = json!(params.stop);
        }
        if let Some(seed) = params.seed {
            payload["seed"] = json!(seed);
        }
        payload
    }

    fn protocol_error(&self, message: impl Into<String>) -> BackendError {
        BackendError::Protocol {
            backend_id: self.id.clone(),
            status: None,
            message: message.into(),
        }
    }
}

fn body_excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    if body.len() <= LIMIT {
        body.to_string()
    } else {
        let cut = body
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}…", &body[..cut])
    }
}

fn parse_finish_reason(value: Option<&Value>) -> FinishReason {
    match value.and_then(Value::as_str) {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Error,
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn describe(&self) -> String {
        self.model_name.clone()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let start = Instant::now();
        let payload = self.generation_payload(req);
        let (body, attempts) = self.call_with_retry(&payload)?;

        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| self.protocol_error("response has no choices"))?;
        let text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| self.protocol_error("choice has no text field"))?
            .to_string();
        let finish_reason = parse_finish_reason(choice.get("finish_reason"));

        let usage = body.get("usage");
        let token_count = |field: &str| {
            usage
                .and_then(|u| u.get(field))
                .and_then(Value::as_u64)
                .map(|n| n as u32)
        };

        // A replayed retry is only a true replay under greedy decoding or a
        // pinned seed; anything else is a fresh sample and gets flagged.
        let deterministic = req.params.temperature == 0.0 || req.params.seed.is_some();
        Ok(GenerationResult {
            text,
            finish_reason,
            prompt_tokens: token_count("prompt_tokens"),
            completion_tokens: token_count("completion_tokens"),
            latency_ms: start.elapsed().as_millis() as u64,
            resampled_on_retry: attempts > 1 && !deterministic,
        })
    }

    fn loglikelihood(
        &self,
        req: &LoglikelihoodRequest,
    ) -> Result<LoglikelihoodResult, BackendError> {
        let payload = json!({
            "model": self.model_name,
            "prompt": format!("{}{}", req.context, req.continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let (body, _attempts) = self.call_with_retry(&payload)?;

        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| self.protocol_error("response has no choices"))?;
        let logprobs = match choice.get("logprobs") {
            Some(lp) if !lp.is_null() => lp,
            _ => {
                return Err(BackendError::Unsupported {
                    backend_id: self.id.clone(),
                    what: "server returned no logprobs for an echo request".to_string(),
                })
            }
        };
        let token_logprobs = logprobs
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| self.protocol_error("logprobs.token_logprobs missing"))?;
        let offsets = logprobs
            .get("text_offset")
            .and_then(Value::as_array)
            .ok_or_else(|| self.protocol_error("logprobs.text_offset missing"))?;
        if token_logprobs.len() != offsets.len() {
            return Err(self.protocol_error("token_logprobs and text_offset length mismatch"));
        }

        // Tokens belong to the continuation when they start at or after the
        // context/continuation byte boundary.
        let boundary = req.context.len() as u64;
        let mut total = 0.0;
        let mut counted = 0usize;
        for (lp, offset) in token_logprobs.iter().zip(offsets) {
            let offset = offset
                .as_u64()
                .ok_or_else(|| self.protocol_error("non-integer text_offset"))?;
            if offset < boundary {
                continue;
            }
            let lp = lp.as_f64().ok_or_else(|| {
                self.protocol_error("null token_logprob inside the continuation")
            })?;
            total += lp;
            counted += 1;
        }
        if counted == 0 {
            return Err(self.protocol_error("no tokens found within the continuation"));
        }
        if !total.is_finite() {
            return Err(self.protocol_error("non-finite continuation logprob"));
        }
        Ok(LoglikelihoodResult {
            logprob: total,
            is_exact_match_greedy: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_policy_steps_are_capped() {
        let policy = RetryPolicy::default();
        // attempt 0 → 250 ms step, attempt 4 → capped at 4 s.
        assert!(policy.delay(0) <= Duration::from_millis(250));
        assert!(policy.delay(4) <= Duration::from_millis(4_000));
        assert!(policy.delay(63) <= Duration::from_millis(4_000));
    }

    #[test]
    fn finish_reason_maps_unknown_to_error() {
        assert_eq!(parse_finish_reason(Some(&json!("stop"))), FinishReason::Stop);
        assert_eq!(
            parse_finish_reason(Some(&json!("length"))),
            FinishReason::Length
        );
        assert_eq!(
            parse_finish_reason(Some(&json!("content_filter"))),
            FinishReason::Error
        );
        assert_eq!(parse_finish_reason(None), FinishReason::Error);
    }

    #[test]
    fn generation_payload_omits_disabled_knobs() {
        let backend = HttpBackend::new("h", "http://x", "m", None, 1000, 0);
        let req = GenerationRequest {
            prompt: "p".to_string(),
            params: crate::config::GenerationParams::default(),
        };
        let payload = backend.generation_payload(&req);
        assert!(payload.get("top_k").is_none());
        assert!(payload.get("stop").is_none());
        assert!(payload.get("seed").is_none());
        assert_eq!(payload["temperature"], json!(0.0));
    }
}
