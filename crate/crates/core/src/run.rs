//! Orchestrator: executes a stack configuration on an input.
//!
//! Stages run strictly in chain order. Stage `k` sees `user_input` plus the
//! cleaned output of every earlier stage; its own cleaned output becomes
//! `stage.<name>` downstream. A stage failure does not raise — it closes
//! the trace with `failed_at_stage` and all completed records retained,
//! because a partial trace is exactly the debugging artifact the chain is
//! built to produce.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use chrono::Utc;
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendSet, FinishReason, GenerationRequest};
use crate::config::{
    validate_stack_config, GenerationParams, StackConfig, StageSpec, Violation, USER_INPUT,
};
use crate::template::{Bindings, TemplateError};
use crate::trace::{new_trace_id, SinkError, StageRecord, Trace, TraceSink, TraceStatus};

/// Character budget for a stage's combined bindings before the longest
/// non-input binding is truncated from the left.
pub const DEFAULT_CONTEXT_BUDGET_CHARS: usize = 4096;

/// Options for one [`run_stack`] call.
pub struct RunOptions<'a> {
    /// Per-stage generation parameter overrides, keyed by stage name.
    pub param_overrides: BTreeMap<String, GenerationParams>,
    /// Stop after this stage completes (inclusive), for partial runs.
    pub stop_after_stage: Option<String>,
    /// Destination for the finished trace; appended before return.
    pub trace_sink: &'a dyn TraceSink,
}

impl<'a> RunOptions<'a> {
    pub fn new(trace_sink: &'a dyn TraceSink) -> Self {
        Self {
            param_overrides: BTreeMap::new(),
            stop_after_stage: None,
            trace_sink,
        }
    }

    pub fn stop_after(mut self, stage: impl Into<String>) -> Self {
        self.stop_after_stage = Some(stage.into());
        self
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config is invalid: {0:?}")]
    InvalidConfig(Vec<Violation>),
    #[error("user input is empty after trimming")]
    EmptyInput,
    #[error("stop_after_stage `{0}` is not a configured stage")]
    UnknownStopStage(String),
    #[error("no resolved backend for id `{0}`")]
    MissingBackend(String),
    #[error(transparent)]
    Sink(#[from] SinkError),
}

/// Why a stage failed. The failure is folded into the trace; this type is
/// what [`run_stage`] reports to direct callers.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub kind: StageErrorKind,
    /// The failure record retained in the trace (outputs empty unless the
    /// backend produced text that cleaned to nothing).
    pub record: StageRecord,
}

#[derive(Debug, Error)]
pub enum StageErrorKind {
    #[error("output was empty after cleaning")]
    EmptyOutput,
    #[error(transparent)]
    Backend(BackendError),
    #[error(transparent)]
    Template(TemplateError),
    #[error(transparent)]
    Context(ContextError),
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}`: {}", self.stage, self.kind)
    }
}

impl std::error::Error for StageError {}

/// Execute `cfg` on `user_input`, persisting the trace to the sink in
/// `opts` before returning it. Stage failures are reported through
/// [`TraceStatus::FailedAtStage`], not as errors; only precondition and
/// sink failures are hard errors.
pub fn run_stack(
    cfg: &StackConfig,
    backends: &BackendSet,
    user_input: &str,
    opts: &RunOptions<'_>,
) -> Result<Trace, RunError> {
    let violations = validate_stack_config(cfg);
    if !violations.is_empty() {
        return Err(RunError::InvalidConfig(violations));
    }
    if user_input.trim().is_empty() {
        return Err(RunError::EmptyInput);
    }
    let stop_index = match &opts.stop_after_stage {
        Some(name) => Some(
            cfg.stage_index(name)
                .ok_or_else(|| RunError::UnknownStopStage(name.clone()))?,
        ),
        None => None,
    };
    for stage in &cfg.stages {
        if !backends.contains_key(&stage.backend_ref) {
            return Err(RunError::MissingBackend(stage.backend_ref.clone()));
        }
    }

    let mut bindings = Bindings::new();
    bindings.insert(USER_INPUT.to_string(), user_input.to_string());

    let mut records: Vec<StageRecord> = Vec::new();
    let mut status = TraceStatus::Complete;

    for (index, stage) in cfg.stages.iter().enumerate() {
        let backend = backends
            .get(&stage.backend_ref)
            .expect("checked above")
            .as_ref();
        let params = opts
            .param_overrides
            .get(&stage.name)
            .cloned()
            .unwrap_or_else(|| stage.gen.clone());

        match run_stage_with_params(stage, backend, &bindings, params) {
            Ok(record) => {
                bindings.insert(
                    format!("stage.{}", stage.name),
                    record.cleaned_output.clone(),
                );
                records.push(record);
            }
            Err(err) => {
                records.push(err.record);
                status = TraceStatus::FailedAtStage(stage.name.clone());
                break;
            }
        }

        if stop_index == Some(index) {
            break;
        }
    }

    let final_output = match status {
        TraceStatus::Complete => records
            .last()
            .map(|r| r.cleaned_output.clone())
            .unwrap_or_default(),
        TraceStatus::FailedAtStage(_) => String::new(),
    };

    let trace = Trace {
        trace_id: new_trace_id(),
        created_at: Utc::now(),
        stack_name: cfg.name.clone(),
        user_input: user_input.to_string(),
        records,
        final_output,
        status,
    };
    opts.trace_sink.append(&trace)?;
    Ok(trace)
}

/// Execute one stage against `bindings` using the stage's own generation
/// params. An output that cleans to the empty string is an error: an empty
/// intermediate text would silently poison every downstream prompt.
pub fn run_stage(
    stage: &StageSpec,
    backend: &dyn Backend,
    bindings: &Bindings,
) -> Result<StageRecord, StageError> {
    run_stage_with_params(stage, backend, bindings, stage.gen.clone())
}

fn run_stage_with_params(
    stage: &StageSpec,
    backend: &dyn Backend,
    bindings: &Bindings,
    params: GenerationParams,
) -> Result<StageRecord, StageError> {
    let start = Instant::now();
    let failure_record = |prompt: String, elapsed_ms: u64, params: GenerationParams| StageRecord {
        stage_name: stage.name.clone(),
        rendered_prompt: prompt,
        raw_output: String::new(),
        cleaned_output: String::new(),
        finish_reason: FinishReason::Error,
        backend_id: stage.backend_ref.clone(),
        gen_params_used: params,
        latency_ms: elapsed_ms,
    };

    let bounded = match truncate_context(bindings, DEFAULT_CONTEXT_BUDGET_CHARS) {
        Ok(b) => b,
        Err(err) => {
            return Err(StageError {
                stage: stage.name.clone(),
                record: failure_record(String::new(), 0, params),
                kind: StageErrorKind::Context(err),
            })
        }
    };

    let prompt = match stage.template.render(&bounded) {
        Ok(p) => p,
        Err(err) => {
            return Err(StageError {
                stage: stage.name.clone(),
                record: failure_record(String::new(), 0, params),
                kind: StageErrorKind::Template(err),
            })
        }
    };

    let request = GenerationRequest {
        prompt: prompt.clone(),
        params: params.clone(),
    };
    let result = match backend.generate(&request) {
        Ok(r) => r,
        Err(err) => {
            return Err(StageError {
                stage: stage.name.clone(),
                record: failure_record(prompt, start.elapsed().as_millis() as u64, params),
                kind: StageErrorKind::Backend(err),
            })
        }
    };

    let cleaned = stage.clean.apply(&result.text);
    let record = StageRecord {
        stage_name: stage.name.clone(),
        rendered_prompt: prompt,
        raw_output: result.text,
        cleaned_output: cleaned,
        finish_reason: result.finish_reason,
        backend_id: stage.backend_ref.clone(),
        gen_params_used: params,
        latency_ms: start.elapsed().as_millis() as u64,
    };

    if record.cleaned_output.is_empty() {
        return Err(StageError {
            stage: stage.name.clone(),
            kind: StageErrorKind::EmptyOutput,
            record,
        });
    }
    Ok(record)
}

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
}

/// Return a config identical to `cfg` except that `stage_name` points at
/// `new_backend_ref`. The original is untouched; a valid input stays valid.
pub fn swap_stage_backend(
    cfg: &StackConfig,
    stage_name: &str,
    new_backend_ref: &str,
) -> Result<StackConfig, SwapError> {
    if !cfg.backends.contains_key(new_backend_ref) {
        return Err(SwapError::UnknownBackend(new_backend_ref.to_string()));
    }
    let index = cfg
        .stage_index(stage_name)
        .ok_or_else(|| SwapError::UnknownStage(stage_name.to_string()))?;
    let mut swapped = cfg.clone();
    swapped.stages[index].backend_ref = new_backend_ref.to_string();
    Ok(swapped)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("user_input alone ({chars} chars) exceeds the {budget}-char budget")]
    BudgetInfeasible { chars: usize, budget: usize },
}

/// Fit `bindings` into `budget_chars` total characters by truncating the
/// longest non-`user_input` binding from the left (prefixing `…`), repeating
/// until the budget holds. `user_input` itself is never truncated.
///
/// # Panics
/// Panics if `budget_chars < 64`; budgets below that cannot hold a useful
/// prompt and indicate a caller bug.
pub fn truncate_context(bindings: &Bindings, budget_chars: usize) -> Result<Bindings, ContextError> {
    assert!(budget_chars >= 64, "context budget must be >= 64 chars");

    let mut lengths: BTreeMap<String, usize> = bindings
        .iter()
        .map(|(k, v)| (k.clone(), v.chars().count()))
        .collect();
    let mut total: usize = lengths.values().sum();
    if total <= budget_chars {
        return Ok(bindings.clone());
    }

    if let Some(user_len) = lengths.get(USER_INPUT) {
        if *user_len > budget_chars {
            return Err(ContextError::BudgetInfeasible {
                chars: *user_len,
                budget: budget_chars,
            });
        }
    }

    let mut out = bindings.clone();
    while total > budget_chars {
        // Longest truncatable binding; BTreeMap order makes ties stable.
        let target = lengths
            .iter()
            .filter(|(k, len)| k.as_str() != USER_INPUT && **len > 1)
            .max_by_key(|(_, len)| **len)
            .map(|(k, _)| k.clone());
        let Some(key) = target else {
            return Err(ContextError::BudgetInfeasible {
                chars: total,
                budget: budget_chars,
            });
        };

        let len = lengths[&key];
        let need = total - budget_chars;
        // Keep `new_len` chars including the `…` marker; floor of 1 keeps
        // the marker alone and moves on to the next-longest binding.
        let new_len = len.saturating_sub(need).max(1);
        let value = &out[&key];
        let tail_chars = new_len - 1;
        let skip = value.chars().count() - tail_chars;
        let tail: String = value.chars().skip(skip).collect();
        out.insert(key.clone(), format!("…{tail}"));
        total -= len - new_len;
        lengths.insert(key, new_len);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bindings(pairs: &[(&str, &str)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn truncate_within_budget_is_identity() {
        let b = bindings(&[("user_input", "short"), ("stage.a", "also short")]);
        assert_eq!(truncate_context(&b, 64).unwrap(), b);
    }

    #[test]
    fn truncate_cuts_longest_binding_from_the_left() {
        let long = "x".repeat(10_000);
        let b = bindings(&[
            ("user_input", "question"),
            ("stage.explanation", long.as_str()),
            ("stage.instruction", "do the thing"),
        ]);
        let out = truncate_context(&b, 512).unwrap();
        let explanation = &out["stage.explanation"];
        assert!(explanation.starts_with('…'));
        // 8 + 12 chars of untouched bindings leaves 492 for the explanation.
        assert_eq!(explanation.chars().count(), 512 - 8 - 12);
        let total: usize = out.values().map(|v| v.chars().count()).sum();
        assert_eq!(total, 512);
        assert_eq!(out["user_input"], "question");
    }

    #[test]
    fn truncate_spills_to_next_longest_when_needed() {
        let b = bindings(&[
            ("user_input", &"u".repeat(60)),
            ("stage.a", &"a".repeat(40)),
            ("stage.b", &"b".repeat(30)),
        ]);
        let out = truncate_context(&b, 64).unwrap();
        let total: usize = out.values().map(|v| v.chars().count()).sum();
        assert_eq!(total, 64);
        assert_eq!(out["user_input"].chars().count(), 60);
    }

    #[test]
    fn oversized_user_input_is_infeasible() {
        let long = "u".repeat(600);
        let b = bindings(&[("user_input", long.as_str())]);
        assert_eq!(
            truncate_context(&b, 512).unwrap_err(),
            ContextError::BudgetInfeasible {
                chars: 600,
                budget: 512
            }
        );
    }

    #[test]
    fn untruncatable_overflow_is_infeasible() {
        // user_input fills the budget exactly; single-char bindings cannot
        // shrink below the marker.
        let user = "u".repeat(64);
        let b = bindings(&[("user_input", user.as_str()), ("stage.a", "x")]);
        assert!(matches!(
            truncate_context(&b, 64),
            Err(ContextError::BudgetInfeasible { .. })
        ));
    }
}
