//! Run traces: the machine-readable record of one stack execution.
//!
//! A trace captures, per stage, the rendered prompt, the raw and cleaned
//! outputs, and generation metadata — the breakdown a human inspects to
//! spot a faulty stage. Traces persist to an append-only JSONL sink, one
//! object per line; the schema is documented in `docs/trace-schema.md`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::FinishReason;
use crate::config::GenerationParams;

/// Outcome of a run: either every requested stage completed, or execution
/// stopped at the named stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Complete,
    FailedAtStage(String),
}

/// Everything recorded about one executed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage_name: String,
    pub rendered_prompt: String,
    pub raw_output: String,
    pub cleaned_output: String,
    pub finish_reason: FinishReason,
    pub backend_id: String,
    pub gen_params_used: GenerationParams,
    pub latency_ms: u64,
}

/// One pipeline run, end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    /// 128 random bits, hex-encoded (32 chars).
    pub trace_id: String,
    pub created_at: DateTime<Utc>,
    pub stack_name: String,
    pub user_input: String,
    pub records: Vec<StageRecord>,
    pub final_output: String,
    pub status: TraceStatus,
}

/// Fresh collision-free trace id: 128 random bits as 32 hex chars.
pub fn new_trace_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("trace sink {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Destination for run traces. Appends must be serialized; implementations
/// here lock internally so shared handles are safe across threads.
pub trait TraceSink: Send + Sync {
    fn append(&self, trace: &Trace) -> Result<(), SinkError>;
}

/// Append-only JSONL file sink, one trace per line.
pub struct JsonlTraceSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl JsonlTraceSink {
    /// Open (creating if absent) the sink file for appending.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, SinkError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| SinkError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl TraceSink for JsonlTraceSink {
    fn append(&self, trace: &Trace) -> Result<(), SinkError> {
        let mut line = serde_json::to_string(trace).expect("trace serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("sink lock");
        file.write_all(line.as_bytes())
            .and_then(|()| file.flush())
            .map_err(|source| SinkError::Io {
                path: self.path.display().to_string(),
                source,
            })
    }
}

/// In-memory sink for tests and library callers that inspect traces
/// directly.
#[derive(Default)]
pub struct MemoryTraceSink {
    traces: Mutex<Vec<Trace>>,
}

impl MemoryTraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn traces(&self) -> Vec<Trace> {
        self.traces.lock().expect("sink lock").clone()
    }
}

impl TraceSink for MemoryTraceSink {
    fn append(&self, trace: &Trace) -> Result<(), SinkError> {
        self.traces.lock().expect("sink lock").push(trace.clone());
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceLoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: invalid trace: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
}

/// Load every trace from a JSONL file, in file order. Blank lines are
/// skipped; a malformed line is an error with its line number.
pub fn load_traces(path: &Path) -> Result<Vec<Trace>, TraceLoadError> {
    let file = File::open(path).map_err(|source| TraceLoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut traces = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TraceLoadError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let trace = serde_json::from_str(&line).map_err(|err| TraceLoadError::Line {
            path: path.display().to_string(),
            line: index + 1,
            message: err.to_string(),
        })?;
        traces.push(trace);
    }
    Ok(traces)
}
