//! Scripted backend: a deterministic rule table standing in for a model.
//!
//! Rules are matched in order and the first hit wins; an unmatched request
//! is an error rather than a silent default, so fixture gaps fail loudly.
//! Tables load from JSON files (see `docs/config-schema.md`).

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Backend, BackendError, FinishReason, GenerationRequest, GenerationResult,
    LoglikelihoodRequest, LoglikelihoodResult,
};

/// How a rule matches the incoming prompt or context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    Exact(String),
    Substring(String),
}

impl Matcher {
    pub fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Exact(expected) => text == expected,
            Matcher::Substring(needle) => text.contains(needle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub output: String,
    #[serde(default)]
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoglikelihoodRule {
    pub context: Matcher,
    /// Matched exactly against the requested continuation.
    pub continuation: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedBackendTable {
    #[serde(default)]
    pub generate_rules: Vec<GenerateRule>,
    #[serde(default)]
    pub loglikelihood_rules: Vec<LoglikelihoodRule>,
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid table JSON at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("loglikelihood rule {index} has a non-finite logprob")]
    NonFiniteLogprob { index: usize },
}

impl ScriptedBackendTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        let text = std::fs::read_to_string(path).map_err(|source| TableError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TableError> {
        let table: ScriptedBackendTable =
            serde_json::from_str(text).map_err(|err| TableError::Parse {
                line: err.line(),
                message: err.to_string(),
            })?;
        for (index, rule) in table.loglikelihood_rules.iter().enumerate() {
            if !rule.logprob.is_finite() {
                return Err(TableError::NonFiniteLogprob { index });
            }
        }
        Ok(table)
    }

    /// Add a rule matching any prompt containing `needle`.
    pub fn on_substring(mut self, needle: impl Into<String>, output: impl Into<String>) -> Self {
        self.generate_rules.push(GenerateRule {
            matcher: Matcher::Substring(needle.into()),
            output: output.into(),
            finish_reason: FinishReason::Stop,
        });
        self
    }

    /// Add a rule matching the prompt exactly.
    pub fn on_exact(mut self, prompt: impl Into<String>, output: impl Into<String>) -> Self {
        self.generate_rules.push(GenerateRule {
            matcher: Matcher::Exact(prompt.into()),
            output: output.into(),
            finish_reason: FinishReason::Stop,
        });
        self
    }

    /// Add a loglikelihood rule for contexts containing `context_needle`.
    pub fn score_substring(
        mut self,
        context_needle: impl Into<String>,
        continuation: impl Into<String>,
        logprob: f64,
    ) -> Self {
        self.loglikelihood_rules.push(LoglikelihoodRule {
            context: Matcher::Substring(context_needle.into()),
            continuation: continuation.into(),
            logprob,
        });
        self
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    id: String,
    table: ScriptedBackendTable,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, table: ScriptedBackendTable) -> Self {
        Self {
            id: id.into(),
            table,
        }
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 120;
    if text.len() <= LIMIT {
        return text.to_string();
    }
    let cut = text
        .char_indices()
        .take_while(|(i, _)| *i < LIMIT)
        .last()
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    format!("{}…", &text[..cut])
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn describe(&self) -> String {
        format!(
            "scripted:{}g/{}ll",
            self.table.generate_rules.len(),
            self.table.loglikelihood_rules.len()
        )
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let start = Instant::now();
        for rule in &self.table.generate_rules {
            if rule.matcher.matches(&req.prompt) {
                let mut result = GenerationResult::text(rule.output.clone(), rule.finish_reason);
                result.latency_ms = start.elapsed().as_millis() as u64;
                return Ok(result);
            }
        }
        Err(BackendError::NoRuleMatched {
            backend_id: self.id.clone(),
            request: excerpt(&req.prompt),
        })
    }

    fn loglikelihood(
        &self,
        req: &LoglikelihoodRequest,
    ) -> Result<LoglikelihoodResult, BackendError> {
        for rule in &self.table.loglikelihood_rules {
            if rule.continuation == req.continuation && rule.context.matches(&req.context) {
                return Ok(LoglikelihoodResult {
                    logprob: rule.logprob,
                    is_exact_match_greedy: None,
                });
            }
        }
        Err(BackendError::NoRuleMatched {
            backend_id: self.id.clone(),
            request: format!("{} ⟂ {}", excerpt(&req.context), excerpt(&req.continuation)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GenerationParams;

    fn request(prompt: &str) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.to_string(),
            params: GenerationParams::default(),
        }
    }

    #[test]
    fn substring_rule_matches_contained_prompt() {
        let table =
            ScriptedBackendTable::new().on_substring("ways to stay healthy", "Find a healthy diet.");
        let backend = ScriptedBackend::new("s", table);
        let result = backend
            .generate(&request("Q: What are ways to stay healthy?\nA:"))
            .unwrap();
        assert_eq!(result.text, "Find a healthy diet.");
    }

    #[test]
    fn unmatched_prompt_is_an_error() {
        let backend = ScriptedBackend::new("s", ScriptedBackendTable::new());
        let err = backend.generate(&request("anything")).unwrap_err();
        assert!(matches!(err, BackendError::NoRuleMatched { .. }));
        assert!(err.to_string().contains("`s`"));
    }

    #[test]
    fn first_matching_rule_wins() {
        let table = ScriptedBackendTable::new()
            .on_substring("x", "first")
            .on_substring("x", "second");
        let backend = ScriptedBackend::new("s", table);
        assert_eq!(backend.generate(&request("x")).unwrap().text, "first");
    }

    #[test]
    fn loglikelihood_argmax_comes_from_table() {
        let table = ScriptedBackendTable::new()
            .score_substring("Q", "A", -1.0)
            .score_substring("Q", "B", -2.0);
        let backend = ScriptedBackend::new("s", table);
        let score = |cont: &str| {
            backend
                .loglikelihood(&LoglikelihoodRequest {
                    context: "Q".to_string(),
                    continuation: cont.to_string(),
                })
                .unwrap()
                .logprob
        };
        assert!(score("A") > score("B"));
    }

    #[test]
    fn zero_logprob_is_allowed() {
        let table = ScriptedBackendTable::new().score_substring("Q", "A", 0.0);
        let backend = ScriptedBackend::new("s", table);
        let result = backend
            .loglikelihood(&LoglikelihoodRequest {
                context: "Q".to_string(),
                continuation: "A".to_string(),
            })
            .unwrap();
        assert_eq!(result.logprob, 0.0);
    }

    #[test]
    fn table_round_trips_through_json() {
        let table = ScriptedBackendTable::new()
            .on_exact("p", "o")
            .score_substring("c", "k", -0.5);
        let text = serde_json::to_string(&table).unwrap();
        assert_eq!(ScriptedBackendTable::parse(&text).unwrap(), table);
    }

    #[test]
    fn non_finite_logprob_rejected_at_load() {
        // JSON has no literal infinity, but a huge exponent overflows to it.
        let text = r#"{"loglikelihood_rules": [{"context": {"substring": "c"}, "continuation": "k", "logprob": 1e999}]}"#;
        assert!(matches!(
            ScriptedBackendTable::parse(text),
            Err(TableError::NonFiniteLogprob { index: 0 }) | Err(TableError::Parse { .. })
        ));
    }

    #[test]
    fn repeated_calls_are_pure() {
        let table = ScriptedBackendTable::new()
            .on_substring("a", "out-a")
            .on_exact("b", "out-b")
            .score_substring("ctx", "cont", -1.5);
        let backend = ScriptedBackend::new("s", table);
        let mut seed = 0x1234_5678_u64;
        for _ in 0..100 {
            // xorshift over a few canned prompts; purity means equal results
            // on every repetition.
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            let prompt = match seed % 3 {
                0 => "contains a here",
                1 => "b",
                _ => "no match",
            };
            let first = backend.generate(&request(prompt));
            let second = backend.generate(&request(prompt));
            match (first, second) {
                (Ok(a), Ok(b)) => assert_eq!(a.text, b.text),
                (Err(_), Err(_)) => {}
                other => panic!("purity violated: {other:?}"),
            }
        }
    }
}
