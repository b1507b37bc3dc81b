//! Core library for FSLM stacks: chains of small language models that
//! communicate through natural-language intermediate texts.
//!
//! A *stack* is a linear chain of stages. Each stage renders a prompt
//! template over the user input and earlier stage outputs, calls a model
//! backend, and cleans the output for the next stage. The library covers:
//!
//! - [`config`] — declarative stack configuration, parsing, and validation
//! - [`template`] — the `{placeholder}` prompt template language
//! - [`backend`] — the model backend contract (HTTP, scripted, echo)
//! - [`run`] — the orchestrator that executes a stack and records a trace
//! - [`trace`] — the per-run interpretability record and its JSONL sink
//! - [`distill`] — teacher-driven generation of per-stage training datasets
//! - [`eval`] — zero-shot multiple-choice evaluation by loglikelihood

pub mod backend;
pub mod config;
pub mod distill;
pub mod eval;
pub mod rng;
pub mod run;
pub mod template;
pub mod testing;
pub mod trace;
pub mod util;

pub use backend::{
    resolve_backends, Backend, BackendError, BackendSet, FinishReason, GenerationRequest,
    GenerationResult, LoglikelihoodRequest, LoglikelihoodResult,
};
pub use config::{
    parse_stack_config, serialize_stack_config, validate_stack_config, BackendSpec,
    CleaningPolicy, GenerationParams, ParseError, StackConfig, StageSpec, Violation,
};
pub use run::{run_stack, run_stage, swap_stage_backend, truncate_context, RunOptions};
pub use template::{Bindings, PromptTemplate, TemplateError};
pub use trace::{JsonlTraceSink, MemoryTraceSink, StageRecord, Trace, TraceSink, TraceStatus};
