//! Zero-shot multiple-choice evaluation of a stack.
//!
//! Intermediate stages consume the raw question; answer options are scored
//! only at the final stage by continuation loglikelihood, and the item's
//! answer is the argmax (ties break to the lowest index). Accuracy is the
//! exact rational `n_correct / n_items`. A backend that cannot score
//! continuations aborts the run loudly — the harness never approximates.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendSet, LoglikelihoodRequest};
use crate::config::{validate_stack_config, StackConfig, Violation, USER_INPUT};
use crate::run::{run_stack, RunOptions};
use crate::template::{Bindings, PromptTemplate};
use crate::trace::{TraceSink, TraceStatus};
use crate::util::parallel_map_ordered;

/// One multiple-choice benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCItem {
    pub item_id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl MCItem {
    fn problem(&self) -> Option<String> {
        if self.question.trim().is_empty() {
            return Some("question is empty".to_string());
        }
        if self.choices.len() < 2 {
            return Some("needs at least 2 choices".to_string());
        }
        if self.choices.iter().any(|c| c.is_empty()) {
            return Some("choices must be non-empty strings".to_string());
        }
        if self.answer_index >= self.choices.len() {
            return Some(format!(
                "answer_index {} out of range for {} choices",
                self.answer_index,
                self.choices.len()
            ));
        }
        None
    }
}

/// Description of one evaluation task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTaskSpec {
    pub task_name: String,
    pub items_path: PathBuf,
    /// Must be 0: the harness is zero-shot only.
    pub num_fewshot: u32,
    /// Renders a choice as the scored continuation; binds `{choice}`.
    pub choice_format: PromptTemplate,
    pub normalize_by_length: bool,
}

impl EvalTaskSpec {
    pub fn new(task_name: impl Into<String>, items_path: impl Into<PathBuf>) -> Self {
        Self {
            task_name: task_name.into(),
            items_path: items_path.into(),
            num_fewshot: 0,
            choice_format: PromptTemplate::new(" {choice}"),
            normalize_by_length: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("task file has invalid items:\n{}", .problems.join("\n"))]
    Parse { problems: Vec<String> },
    #[error("task file contains no items")]
    EmptyTask,
    #[error("only zero-shot evaluation is supported (num_fewshot was {0})")]
    FewshotUnsupported(u32),
    #[error("config is invalid: {0:?}")]
    InvalidConfig(Vec<Violation>),
    #[error("evaluation aborted: {0}")]
    Backend(BackendError),
    #[error("report I/O: {0}")]
    Report(std::io::Error),
}

/// Load a task's items from its JSONL file. Rejects non-zero `num_fewshot`
/// and reports every offending line instead of stopping at the first.
pub fn load_task(spec: &EvalTaskSpec) -> Result<Vec<MCItem>, EvalError> {
    if spec.num_fewshot != 0 {
        return Err(EvalError::FewshotUnsupported(spec.num_fewshot));
    }
    let file = std::fs::File::open(&spec.items_path).map_err(|source| EvalError::Io {
        path: spec.items_path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut items = Vec::new();
    let mut problems = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: spec.items_path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MCItem>(&line) {
            Ok(item) => match item.problem() {
                None => items.push(item),
                Some(problem) => problems.push(format!("line {}: {}", index + 1, problem)),
            },
            Err(err) => problems.push(format!("line {}: {}", index + 1, err)),
        }
    }
    if !problems.is_empty() {
        return Err(EvalError::Parse { problems });
    }
    if items.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    Ok(items)
}

/// Index of the highest score, ties broken by the lowest index.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (index, score) in scores.iter().enumerate().skip(1) {
        if *score > scores[best] {
            best = index;
        }
    }
    best
}

/// Per-item evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item_id: String,
    /// None when the stack failed before scoring.
    pub chosen_index: Option<usize>,
    pub correct: bool,
    pub option_scores: Vec<f64>,
    /// Trace of the partial run that built the context; None in
    /// bypass-stages mode or for single-stage configs.
    pub trace_id: Option<String>,
    /// "ok", "stage_failed:<stage>", or "score_failed:<kind>".
    pub status: String,
}

/// Aggregated results for one (stack, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_name: String,
    pub stack_name: String,
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub per_item: Vec<ItemScore>,
    pub config_hash: String,
}

/// Scoring options shared by every item of a run.
pub struct ScoreOptions<'a> {
    pub trace_sink: &'a dyn TraceSink,
    pub choice_format: &'a PromptTemplate,
    pub normalize_by_length: bool,
    /// Score against the final stage alone, skipping the chain: the raw
    /// question becomes the context. For comparing the stack against its
    /// final model.
    pub bypass_stages: bool,
}

/// Score one item: run the intermediate stages on the question, render the
/// final-stage prompt as the scoring context, and score each rendered
/// choice as a continuation.
///
/// A stage failure marks the item incorrect and continues; only
/// [`BackendError::Unsupported`] (a backend that cannot score at all)
/// aborts the run, via the `Err` branch.
pub fn score_item(
    cfg: &StackConfig,
    backends: &BackendSet,
    item: &MCItem,
    opts: &ScoreOptions<'_>,
) -> Result<ItemScore, EvalError> {
    let failed = |trace_id: Option<String>, status: String| ItemScore {
        item_id: item.item_id.clone(),
        chosen_index: None,
        correct: false,
        option_scores: Vec::new(),
        trace_id,
        status,
    };

    let final_stage = cfg.stages.last().expect("validated config has stages");
    let (context, trace_id) = if opts.bypass_stages {
        (item.question.clone(), None)
    } else if cfg.stages.len() == 1 {
        let mut bindings = Bindings::new();
        bindings.insert(USER_INPUT.to_string(), item.question.clone());
        match final_stage.template.render(&bindings) {
            Ok(context) => (context, None),
            Err(err) => return Ok(failed(None, format!("render_failed:{err}"))),
        }
    } else {
        let stop_stage = cfg.stages[cfg.stages.len() - 2].name.clone();
        let run_opts = RunOptions::new(opts.trace_sink).stop_after(stop_stage);
        let trace = match run_stack(cfg, backends, &item.question, &run_opts) {
            Ok(trace) => trace,
            Err(err) => return Ok(failed(None, format!("run_failed:{err}"))),
        };
        let trace_id = Some(trace.trace_id.clone());
        if let TraceStatus::FailedAtStage(stage) = &trace.status {
            return Ok(failed(trace_id, format!("stage_failed:{stage}")));
        }
        let mut bindings = Bindings::new();
        bindings.insert(USER_INPUT.to_string(), item.question.clone());
        for record in &trace.records {
            bindings.insert(
                format!("stage.{}", record.stage_name),
                record.cleaned_output.clone(),
            );
        }
        match final_stage.template.render(&bindings) {
            Ok(context) => (context, trace_id),
            Err(err) => return Ok(failed(trace_id, format!("render_failed:{err}"))),
        }
    };

    let backend = backends
        .get(&final_stage.backend_ref)
        .expect("validated config resolves backends");

    let mut option_scores = Vec::with_capacity(item.choices.len());
    for choice in &item.choices {
        let mut bindings = Bindings::new();
        bindings.insert("choice".to_string(), choice.clone());
        let continuation = match opts.choice_format.render(&bindings) {
            Ok(c) => c,
            Err(err) => return Ok(failed(trace_id, format!("render_failed:{err}"))),
        };
        let request = LoglikelihoodRequest {
            context: context.clone(),
            continuation,
        };
        let mut score = match backend.loglikelihood(&request) {
            Ok(result) => result.logprob,
            Err(err @ BackendError::Unsupported { .. }) => return Err(EvalError::Backend(err)),
            Err(err) => {
                return Ok(failed(trace_id, format!("score_failed:{}", err.kind())))
            }
        };
        if opts.normalize_by_length {
            score /= choice.len() as f64;
        }
        option_scores.push(score);
    }

    let chosen_index = argmax_lowest(&option_scores);
    Ok(ItemScore {
        item_id: item.item_id.clone(),
        chosen_index: Some(chosen_index),
        correct: chosen_index == item.answer_index,
        option_scores,
        trace_id,
        status: "ok".to_string(),
    })
}

/// Evaluate a whole task. Items are scored concurrently up to `workers`,
/// merged back in item order; an unsupported backend aborts without
/// emitting partial results.
pub fn run_eval(
    cfg: &StackConfig,
    backends: &BackendSet,
    spec: &EvalTaskSpec,
    trace_sink: &dyn TraceSink,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    let violations = validate_stack_config(cfg);
    if !violations.is_empty() {
        return Err(EvalError::InvalidConfig(violations));
    }
    let items = load_task(spec)?;

    let opts = ScoreOptions {
        trace_sink,
        choice_format: &spec.choice_format,
        normalize_by_length: spec.normalize_by_length,
        bypass_stages: false,
    };
    run_eval_with_options(cfg, backends, spec, &items, &opts, workers)
}

/// [`run_eval`] with explicit scoring options (exposes `bypass_stages`).
pub fn run_eval_with_options(
    cfg: &StackConfig,
    backends: &BackendSet,
    spec: &EvalTaskSpec,
    items: &[MCItem],
    opts: &ScoreOptions<'_>,
    workers: usize,
) -> Result<EvalReport, EvalError> {
    let results = parallel_map_ordered(items, workers, |_, item| {
        score_item(cfg, backends, item, opts)
    });

    let mut per_item = Vec::with_capacity(items.len());
    for result in results {
        per_item.push(result?);
    }
    let n_items = per_item.len();
    let n_correct = per_item.iter().filter(|s| s.correct).count();
    Ok(EvalReport {
        task_name: spec.task_name.clone(),
        stack_name: cfg.name.clone(),
        n_items,
        n_correct,
        accuracy: n_correct as f64 / n_items as f64,
        per_item,
        config_hash: cfg.content_hash(),
    })
}

/// Write the JSON report to `path` and return the plain-text summary table
/// (model, task, accuracy to four decimals).
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<String, EvalError> {
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    std::fs::write(path, json).map_err(EvalError::Report)?;
    Ok(summary_table(report))
}

/// Plain-text summary whose row format mirrors the benchmark-table
/// convention: model, task, accuracy at four decimals.
pub fn summary_table(report: &EvalReport) -> String {
    let model_width = report.stack_name.len().max("Model".len());
    let task_width = report.task_name.len().max("Task".len());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<model_width$}  {:<task_width$}  Accuracy\n",
        "Model", "Task"
    ));
    out.push_str(&format!(
        "{:<model_width$}  {:<task_width$}  {:.4}\n",
        report.stack_name, report.task_name, report.accuracy
    ));
    out
}

/// One-line machine-greppable summary.
pub fn summary_line(report: &EvalReport) -> String {
    format!(
        "{} {} acc={:.4}",
        report.task_name, report.stack_name, report.accuracy
    )
}

/// Parse the JSON emitted by [`emit_report`].
pub fn parse_report(text: &str) -> Result<EvalReport, serde_json::Error> {
    serde_json::from_str(text)
}

// ---------------------------------------------------------------------------
// Converter for ARC/MMLU-style task layouts
// ---------------------------------------------------------------------------

/// Convert JSONL in the common ARC/MMLU layout — `question`, `choices`
/// (either `{"text": [...], "label": [...]}` or a plain string array), and
/// `answerKey` (a label like `"B"` or an index) — into the native item
/// schema.
pub fn convert_arc_style(text: &str) -> Result<Vec<MCItem>, EvalError> {
    let mut items = Vec::new();
    let mut problems = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match convert_arc_line(line, index) {
            Ok(item) => items.push(item),
            Err(problem) => problems.push(format!("line {}: {}", index + 1, problem)),
        }
    }
    if !problems.is_empty() {
        return Err(EvalError::Parse { problems });
    }
    if items.is_empty() {
        return Err(EvalError::EmptyTask);
    }
    Ok(items)
}

fn convert_arc_line(line: &str, index: usize) -> Result<MCItem, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let question = value
        .get("question")
        .and_then(|q| q.as_str().map(str::to_string).or_else(|| {
            q.get("stem").and_then(|s| s.as_str()).map(str::to_string)
        }))
        .ok_or("missing question")?;

    let choices_value = value.get("choices").ok_or("missing choices")?;
    let (texts, labels): (Vec<String>, Option<Vec<String>>) = if let Some(array) =
        choices_value.as_array()
    {
        let texts = array
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or("non-string choice"))
            .collect::<Result<Vec<_>, _>>()?;
        (texts, None)
    } else {
        let texts = choices_value
            .get("text")
            .and_then(|t| t.as_array())
            .ok_or("choices.text missing")?
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or("non-string choice"))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = choices_value
            .get("label")
            .and_then(|l| l.as_array())
            .ok_or("choices.label missing")?
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or("non-string label"))
            .collect::<Result<Vec<_>, _>>()?;
        (texts, Some(labels))
    };

    let answer_key = value.get("answerKey").ok_or("missing answerKey")?;
    let answer_index = match (answer_key.as_str(), answer_key.as_u64()) {
        (Some(key), _) => match &labels {
            Some(labels) => labels
                .iter()
                .position(|l| l == key)
                .ok_or_else(|| format!("answerKey {key:?} not among labels"))?,
            // Without labels, letter keys map A→0, B→1, …
            None => {
                let c = key.chars().next().ok_or("empty answerKey")?;
                (c as usize)
                    .checked_sub('A' as usize)
                    .filter(|i| *i < texts.len())
                    .ok_or_else(|| format!("answerKey {key:?} out of range"))?
            }
        },
        (None, Some(n)) => n as usize,
        _ => return Err("answerKey must be a string or integer".to_string()),
    };

    let item = MCItem {
        item_id: value
            .get("id")
            .and_then(|i| i.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("item{index}")),
        question,
        choices: texts,
        answer_index,
        subject: value
            .get("subject")
            .and_then(|s| s.as_str())
            .map(str::to_string),
    };
    item.problem().map_or(Ok(item), Err)
}
