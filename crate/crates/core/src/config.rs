//! Stack configuration: the declarative description of a stage chain.
//!
//! The concrete syntax is strict UTF-8 JSON (unknown fields are rejected)
//! with top-level keys `name`, `version`, `stages`, `backends`. See
//! `docs/config-schema.md` for the full schema. Parsing checks shape and
//! per-field bounds; cross-references (backend ids, placeholder targets)
//! are checked separately by [`validate_stack_config`], which reports every
//! violation rather than stopping at the first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::PromptTemplate;

/// Placeholder name under which the user's request is bound at every stage.
pub const USER_INPUT: &str = "user_input";

/// A full stack configuration: an ordered chain of stages plus the backends
/// they resolve to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub name: String,
    pub version: String,
    pub stages: Vec<StageSpec>,
    pub backends: BTreeMap<String, BackendSpec>,
}

impl StackConfig {
    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded.
    pub fn content_hash(&self) -> String {
        crate::util::sha256_hex(serialize_stack_config(self).as_bytes())
    }
}

/// One position in the chain: a template, a backend reference, sampling
/// params, and an output-cleaning policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    #[serde(default)]
    pub role_description: String,
    pub template: PromptTemplate,
    pub backend_ref: String,
    #[serde(default)]
    pub gen: GenerationParams,
    #[serde(default)]
    pub clean: CleaningPolicy,
}

/// Sampling parameters for one generation call.
///
/// Construction is validated: `temperature >= 0`, `top_p` in `(0, 1]`,
/// `max_tokens >= 1`, and at most 4 stop strings. The same bounds apply
/// when deserializing from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGenerationParams")]
pub struct GenerationParams {
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: u32,
    pub top_p: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl GenerationParams {
    pub fn new(
        temperature: f64,
        top_k: u32,
        top_p: f64,
        max_tokens: u32,
        stop: Vec<String>,
        seed: Option<i64>,
    ) -> Result<Self, ParamsError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(ParamsError::Temperature(temperature));
        }
        if !top_p.is_finite() || top_p <= 0.0 || top_p > 1.0 {
            return Err(ParamsError::TopP(top_p));
        }
        if max_tokens < 1 {
            return Err(ParamsError::MaxTokens);
        }
        if stop.len() > 4 {
            return Err(ParamsError::TooManyStops(stop.len()));
        }
        Ok(Self {
            temperature,
            top_k,
            top_p,
            max_tokens,
            stop,
            seed,
        })
    }

    /// Greedy decoding with the given completion budget.
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            max_tokens,
            ..Self::default()
        }
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_k: 0,
            top_p: 1.0,
            max_tokens: 128,
            stop: Vec::new(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("temperature must be a finite real >= 0, got {0}")]
    Temperature(f64),
    #[error("top_p must be in (0, 1], got {0}")]
    TopP(f64),
    #[error("max_tokens must be >= 1")]
    MaxTokens,
    #[error("at most 4 stop strings allowed, got {0}")]
    TooManyStops(usize),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerationParams {
    #[serde(default)]
    temperature: f64,
    #[serde(default)]
    top_k: u32,
    #[serde(default = "default_top_p")]
    top_p: f64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
    #[serde(default)]
    stop: Vec<String>,
    #[serde(default)]
    seed: Option<i64>,
}

fn default_top_p() -> f64 {
    1.0
}

fn default_max_tokens() -> u32 {
    128
}

impl TryFrom<RawGenerationParams> for GenerationParams {
    type Error = ParamsError;

    fn try_from(raw: RawGenerationParams) -> Result<Self, ParamsError> {
        GenerationParams::new(
            raw.temperature,
            raw.top_k,
            raw.top_p,
            raw.max_tokens,
            raw.stop,
            raw.seed,
        )
    }
}

/// How a stage's raw model output is cleaned before it flows downstream.
/// Cleaning is idempotent: applying a policy twice equals applying it once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningPolicy {
    pub strip_whitespace: bool,
    pub strip_outer_quotes: bool,
    pub collapse_to_first_line: bool,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        Self {
            strip_whitespace: true,
            strip_outer_quotes: false,
            collapse_to_first_line: false,
        }
    }
}

impl CleaningPolicy {
    /// Apply the policy until a fixpoint is reached.
    pub fn apply(&self, raw: &str) -> String {
        let mut text = raw.to_string();
        loop {
            let next = self.apply_once(&text);
            if next == text {
                return text;
            }
            text = next;
        }
    }

    fn apply_once(&self, text: &str) -> String {
        let mut s = text;
        if self.strip_whitespace {
            s = s.trim();
        }
        let mut s = if self.collapse_to_first_line {
            s.split('\n').next().unwrap_or("").to_string()
        } else {
            s.to_string()
        };
        if self.strip_outer_quotes
            && s.len() >= 2
            && s.starts_with('"')
            && s.ends_with('"')
        {
            s = s[1..s.len() - 1].to_string();
        }
        if self.strip_whitespace {
            s = s.trim().to_string();
        }
        s
    }
}

/// Where a stage's text comes from: an OpenAI-compatible HTTP server, a
/// deterministic rule table, or an echo double for chain-composition tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Http {
        base_url: String,
        model_name: String,
        /// Name of the environment variable holding the API key. Keys are
        /// never written into config files.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_max_retries")]
        max_retries: u32,
    },
    Scripted {
        /// Rule table file; relative paths resolve against the config file's
        /// directory.
        path: PathBuf,
    },
    Echo {
        marker: String,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    2
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown field `{field}` at line {line}, column {column}")]
    UnknownField {
        field: String,
        line: usize,
        column: usize,
    },
    #[error("invalid value at line {line}, column {column}: {message}")]
    InvalidValue {
        line: usize,
        column: usize,
        message: String,
    },
}

/// Parse a stack config from its strict JSON syntax.
///
/// Shape, types, and per-field bounds are enforced here; cross-references
/// are left to [`validate_stack_config`]. Parsed configs round-trip through
/// [`serialize_stack_config`].
pub fn parse_stack_config(text: &str) -> Result<StackConfig, ParseError> {
    serde_json::from_str(text).map_err(classify_json_error)
}

/// Serialize a config to the canonical pretty-printed JSON syntax.
pub fn serialize_stack_config(cfg: &StackConfig) -> String {
    let mut out = serde_json::to_string_pretty(cfg).expect("config serializes");
    out.push('\n');
    out
}

fn classify_json_error(err: serde_json::Error) -> ParseError {
    let line = err.line();
    let column = err.column();
    let message = err.to_string();
    if err.classify() == serde_json::error::Category::Data {
        // serde's strict-schema rejection reads `unknown field `name`, ...`;
        // surface the field name as typed data.
        if let Some(field) = message
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
        {
            return ParseError::UnknownField {
                field: field.to_string(),
                line,
                column,
            };
        }
        let message = match message.split(" at line ").next() {
            Some(head) => head.to_string(),
            None => message,
        };
        return ParseError::InvalidValue {
            line,
            column,
            message,
        };
    }
    let message = match message.split(" at line ").next() {
        Some(head) => head.to_string(),
        None => message,
    };
    ParseError::Syntax {
        line,
        column,
        message,
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// A single rule broken by a config. Violations are data, not errors:
/// validation always runs to completion and reports all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoStages,
    InvalidStageName {
        stage: String,
    },
    DuplicateStageName {
        stage: String,
    },
    UnknownBackendRef {
        stage: String,
        backend_ref: String,
    },
    EmptyTemplate {
        stage: String,
    },
    TemplateSyntax {
        stage: String,
        message: String,
    },
    /// A template references a stage at the same or a later chain position.
    ForwardReference {
        stage: String,
        target: String,
    },
    /// A template references a name that is neither `user_input` nor a
    /// configured stage.
    UnknownReference {
        stage: String,
        target: String,
    },
    InvalidBackend {
        backend_id: String,
        message: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStages => write!(f, "config has no stages"),
            Violation::InvalidStageName { stage } => write!(
                f,
                "stage name `{stage}` is invalid (want [a-z][a-z0-9_]{{0,31}})"
            ),
            Violation::DuplicateStageName { stage } => {
                write!(f, "duplicate stage name `{stage}`")
            }
            Violation::UnknownBackendRef { stage, backend_ref } => write!(
                f,
                "stage `{stage}` references undeclared backend `{backend_ref}`"
            ),
            Violation::EmptyTemplate { stage } => {
                write!(f, "stage `{stage}` has an empty template")
            }
            Violation::TemplateSyntax { stage, message } => {
                write!(f, "stage `{stage}` template: {message}")
            }
            Violation::ForwardReference { stage, target } => write!(
                f,
                "stage `{stage}` references `{target}`, which is not an earlier stage"
            ),
            Violation::UnknownReference { stage, target } => {
                write!(f, "stage `{stage}` references unknown name `{target}`")
            }
            Violation::InvalidBackend {
                backend_id,
                message,
            } => write!(f, "backend `{backend_id}`: {message}"),
        }
    }
}

/// `true` for `[a-z][a-z0-9_]{0,31}`.
pub fn is_valid_stage_name(name: &str) -> bool {
    if name.is_empty() || name.len() > 32 {
        return false;
    }
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Check every invariant of a parsed config and return all violations.
/// An empty list means the config is valid.
pub fn validate_stack_config(cfg: &StackConfig) -> Vec<Violation> {
    let mut violations = Vec::new();

    if cfg.stages.is_empty() {
        violations.push(Violation::NoStages);
    }

    let mut seen = BTreeSet::new();
    for stage in &cfg.stages {
        if !is_valid_stage_name(&stage.name) {
            violations.push(Violation::InvalidStageName {
                stage: stage.name.clone(),
            });
        }
        if !seen.insert(stage.name.clone()) {
            violations.push(Violation::DuplicateStageName {
                stage: stage.name.clone(),
            });
        }
        if !cfg.backends.contains_key(&stage.backend_ref) {
            violations.push(Violation::UnknownBackendRef {
                stage: stage.name.clone(),
                backend_ref: stage.backend_ref.clone(),
            });
        }
    }

    for (index, stage) in cfg.stages.iter().enumerate() {
        if stage.template.source.is_empty() {
            violations.push(Violation::EmptyTemplate {
                stage: stage.name.clone(),
            });
            continue;
        }
        let placeholders = match stage.template.placeholders() {
            Ok(p) => p,
            Err(err) => {
                violations.push(Violation::TemplateSyntax {
                    stage: stage.name.clone(),
                    message: err.to_string(),
                });
                continue;
            }
        };
        violations.extend(check_references(
            cfg,
            &stage.name,
            index,
            &placeholders,
            &[],
        ));
    }

    for (backend_id, spec) in &cfg.backends {
        if let Some(message) = backend_spec_problem(spec) {
            violations.push(Violation::InvalidBackend {
                backend_id: backend_id.clone(),
                message,
            });
        }
    }

    violations
}

/// Check that `placeholders` reference only `user_input`, names in
/// `extra_allowed`, or stages strictly before `position` in `cfg`'s chain.
/// Shared with distillation meta-template validation.
pub(crate) fn check_references(
    cfg: &StackConfig,
    stage_name: &str,
    position: usize,
    placeholders: &[String],
    extra_allowed: &[&str],
) -> Vec<Violation> {
    let mut violations = Vec::new();
    for name in placeholders {
        if let Some(target) = name.strip_prefix("stage.") {
            match cfg.stage_index(target) {
                Some(target_index) if target_index < position => {}
                Some(_) => violations.push(Violation::ForwardReference {
                    stage: stage_name.to_string(),
                    target: target.to_string(),
                }),
                None => violations.push(Violation::UnknownReference {
                    stage: stage_name.to_string(),
                    target: name.clone(),
                }),
            }
        } else if name != USER_INPUT && !extra_allowed.contains(&name.as_str()) {
            violations.push(Violation::UnknownReference {
                stage: stage_name.to_string(),
                target: name.clone(),
            });
        }
    }
    violations
}

fn backend_spec_problem(spec: &BackendSpec) -> Option<String> {
    match spec {
        BackendSpec::Http {
            base_url,
            model_name,
            timeout_ms,
            ..
        } => {
            if base_url.is_empty() {
                return Some("http backend requires a non-empty base_url".to_string());
            }
            if model_name.is_empty() {
                return Some("http backend requires a non-empty model_name".to_string());
            }
            if *timeout_ms < 1 {
                return Some("timeout_ms must be >= 1".to_string());
            }
            None
        }
        BackendSpec::Scripted { path } => {
            if path.as_os_str().is_empty() {
                Some("scripted backend requires a table path".to_string())
            } else {
                None
            }
        }
        BackendSpec::Echo { .. } => None,
    }
}

/// Validate a standalone template against a config's chain, as if it were
/// owned by the stage at `position`. Used for distillation meta-templates,
/// which may additionally reference the names in `extra_allowed`.
pub(crate) fn template_violations_for(
    cfg: &StackConfig,
    owner: &str,
    position: usize,
    template: &PromptTemplate,
    extra_allowed: &[&str],
) -> Vec<Violation> {
    if template.source.is_empty() {
        return vec![Violation::EmptyTemplate {
            stage: owner.to_string(),
        }];
    }
    match template.placeholders() {
        Ok(placeholders) => check_references(cfg, owner, position, &placeholders, extra_allowed),
        Err(err) => vec![Violation::TemplateSyntax {
            stage: owner.to_string(),
            message: err.to_string(),
        }],
    }
}
