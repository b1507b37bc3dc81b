//! The model-backend contract: text generation and loglikelihood scoring.
//!
//! Every stage talks to a [`Backend`] through the same two calls, so a
//! config can mix a networked server with deterministic test doubles. The
//! scripted and echo backends are pure functions of their inputs, which is
//! what makes whole-chain behavior assertable byte-for-byte.

mod echo;
mod http;
mod scripted;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendSpec, GenerationParams, StackConfig};

pub use echo::EchoBackend;
pub use http::{HttpBackend, RetryPolicy};
pub use scripted::{GenerateRule, LoglikelihoodRule, Matcher, ScriptedBackend, ScriptedBackendTable, TableError};

/// Why a generation call stopped producing text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl Default for FinishReason {
    fn default() -> Self {
        FinishReason::Stop
    }
}

/// A single text-generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// Fully rendered prompt; never empty in practice.
    pub prompt: String,
    pub params: GenerationParams,
}

/// Raw (pre-cleaning) output of one generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub prompt_tokens: Option<u32>,
    pub completion_tokens: Option<u32>,
    pub latency_ms: u64,
    /// True when a retried request could not be replayed deterministically
    /// (sampling enabled with no fixed seed), so the returned text is a
    /// fresh sample rather than a repeat of the failed attempt.
    pub resampled_on_retry: bool,
}

impl GenerationResult {
    pub fn text(text: impl Into<String>, finish_reason: FinishReason) -> Self {
        Self {
            text: text.into(),
            finish_reason,
            prompt_tokens: None,
            completion_tokens: None,
            latency_ms: 0,
            resampled_on_retry: false,
        }
    }
}

/// Score `continuation` given `context`. Scores are comparable across
/// continuations for a fixed context; higher means more likely.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglikelihoodRequest {
    pub context: String,
    /// Never empty.
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoglikelihoodResult {
    /// Finite score; backends may return any finite real, not only values
    /// <= 0.
    pub logprob: f64,
    pub is_exact_match_greedy: Option<bool>,
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("backend `{backend_id}`: timed out after {attempts} attempt(s)")]
    Timeout { backend_id: String, attempts: u32 },
    #[error("backend `{backend_id}`: protocol error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Protocol {
        backend_id: String,
        status: Option<u16>,
        message: String,
    },
    #[error("backend `{backend_id}`: no rule matched request {request:?}")]
    NoRuleMatched { backend_id: String, request: String },
    #[error("backend `{backend_id}`: unsupported: {what}")]
    Unsupported { backend_id: String, what: String },
}

impl BackendError {
    /// Short stable kind token, used in rejection reasons and statuses.
    pub fn kind(&self) -> &'static str {
        match self {
            BackendError::Timeout { .. } => "Timeout",
            BackendError::Protocol { .. } => "Protocol",
            BackendError::NoRuleMatched { .. } => "NoRuleMatched",
            BackendError::Unsupported { .. } => "Unsupported",
        }
    }
}

/// A model backend. Implementations are either stateless per call or
/// internally synchronized, so handles can be shared across threads.
pub trait Backend: Send + Sync {
    /// The backend id this handle was resolved under; every error carries it.
    fn id(&self) -> &str;

    /// Human-readable model descriptor (model name, table file, marker).
    fn describe(&self) -> String;

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    fn loglikelihood(&self, req: &LoglikelihoodRequest)
        -> Result<LoglikelihoodResult, BackendError>;
}

/// Resolved backend handles keyed by backend id.
pub type BackendSet = BTreeMap<String, Arc<dyn Backend>>;

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("backend `{backend_id}`: failed to load rule table: {source}")]
    Table {
        backend_id: String,
        #[source]
        source: TableError,
    },
    #[error("backend `{backend_id}`: environment variable `{var}` is not set")]
    MissingApiKey { backend_id: String, var: String },
}

/// Build live handles for every backend a config declares.
///
/// Scripted table paths resolve relative to `base_dir` (normally the config
/// file's directory). HTTP API keys are read once, here, from the named
/// environment variables.
pub fn resolve_backends(cfg: &StackConfig, base_dir: &Path) -> Result<BackendSet, ResolveError> {
    let mut set = BackendSet::new();
    for (backend_id, spec) in &cfg.backends {
        let handle: Arc<dyn Backend> = match spec {
            BackendSpec::Echo { marker } => Arc::new(EchoBackend::new(backend_id, marker)),
            BackendSpec::Scripted { path } => {
                let full = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                let table =
                    ScriptedBackendTable::load(&full).map_err(|source| ResolveError::Table {
                        backend_id: backend_id.clone(),
                        source,
                    })?;
                Arc::new(ScriptedBackend::new(backend_id, table))
            }
            BackendSpec::Http {
                base_url,
                model_name,
                api_key_env,
                timeout_ms,
                max_retries,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        ResolveError::MissingApiKey {
                            backend_id: backend_id.clone(),
                            var: var.clone(),
                        }
                    })?),
                    None => None,
                };
                Arc::new(HttpBackend::new(
                    backend_id,
                    base_url,
                    model_name,
                    api_key,
                    *timeout_ms,
                    *max_retries,
                ))
            }
        };
        set.insert(backend_id.clone(), handle);
    }
    Ok(set)
}
