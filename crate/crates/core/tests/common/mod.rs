//! Shared fixtures for integration tests.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use fslm_core::backend::{Backend, BackendSet, EchoBackend, ScriptedBackend, ScriptedBackendTable};
use fslm_core::config::{
    BackendSpec, CleaningPolicy, GenerationParams, StackConfig, StageSpec,
};
use fslm_core::template::PromptTemplate;
use fslm_core::trace::Trace;

/// The canonical qualitative example: user input and the four stage texts.
pub const TABLE2_INPUT: &str = "What are ways to stay healthy?";
pub const TABLE2_INSTRUCTION: &str = "Find a healthy diet.";
pub const TABLE2_SEARCH_TERM_RAW: &str = "\"How to keep your body healthy\"";
pub const TABLE2_SEARCH_TERM: &str = "How to keep your body healthy";
pub const TABLE2_EXPLANATION: &str = "The most important thing to remember is to keep your body healthy. If you don't, your body will be damaged and you'll be unable to perform the essential tasks of daily living.";
pub const TABLE2_FINAL: &str = "Healthy eating is a key component of maintaining a healthy lifestyle.";

/// Repo root (tests run from the crate directory).
pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("repo root resolves")
}

pub fn stage(name: &str, template: &str, backend_ref: &str) -> StageSpec {
    StageSpec {
        name: name.to_string(),
        role_description: String::new(),
        template: PromptTemplate::new(template),
        backend_ref: backend_ref.to_string(),
        gen: GenerationParams::default(),
        clean: CleaningPolicy::default(),
    }
}

pub fn config(name: &str, stages: Vec<StageSpec>, backends: Vec<(&str, BackendSpec)>) -> StackConfig {
    StackConfig {
        name: name.to_string(),
        version: "1".to_string(),
        stages,
        backends: backends
            .into_iter()
            .map(|(id, spec)| (id.to_string(), spec))
            .collect(),
    }
}

pub fn echo_spec(marker: &str) -> BackendSpec {
    BackendSpec::Echo {
        marker: marker.to_string(),
    }
}

/// Dummy spec for configs whose handles are built directly in the test.
pub fn scripted_spec() -> BackendSpec {
    BackendSpec::Scripted {
        path: PathBuf::from("unused.json"),
    }
}

pub fn backend_set(entries: Vec<(&str, Arc<dyn Backend>)>) -> BackendSet {
    entries
        .into_iter()
        .map(|(id, handle)| (id.to_string(), handle))
        .collect()
}

pub fn scripted(id: &str, table: ScriptedBackendTable) -> Arc<dyn Backend> {
    Arc::new(ScriptedBackend::new(id, table))
}

pub fn echo(id: &str, marker: &str) -> Arc<dyn Backend> {
    Arc::new(EchoBackend::new(id, marker))
}

/// The reference 4-stage chain over a single scripted backend whose rules
/// key on each stage template's distinctive lead-in.
pub fn table2_config(backend_id: &str) -> StackConfig {
    let mut search_term = stage(
        "search_term",
        "Write a short web search query for this instruction.\nInstruction: {stage.instruction}\nSearch query:",
        backend_id,
    );
    search_term.clean.strip_outer_quotes = true;
    config(
        "table2_stack",
        vec![
            stage(
                "instruction",
                "Write a one-line instruction that addresses this request.\nRequest: {user_input}\nInstruction:",
                backend_id,
            ),
            search_term,
            stage(
                "explanation",
                "Write a short explanatory passage for the query.\nQuery: {stage.search_term}\nPassage:",
                backend_id,
            ),
            stage(
                "final_output",
                "Request: {user_input}\nContext: {stage.explanation}\nResponse:",
                backend_id,
            ),
        ],
        vec![(backend_id, scripted_spec())],
    )
}

/// Rule table reproducing the four reference texts, keyed on template
/// markers so it answers regardless of the user input.
pub fn table2_rules() -> ScriptedBackendTable {
    ScriptedBackendTable::new()
        .on_substring(
            "Write a one-line instruction that addresses this request.",
            TABLE2_INSTRUCTION,
        )
        .on_substring(
            "Write a short web search query for this instruction.",
            TABLE2_SEARCH_TERM_RAW,
        )
        .on_substring(
            "Write a short explanatory passage for the query.",
            TABLE2_EXPLANATION,
        )
        .on_substring("Context:", TABLE2_FINAL)
}

/// Strip run-variant fields so traces can be compared structurally.
pub fn normalized(trace: &Trace) -> Trace {
    let mut t = trace.clone();
    t.trace_id = String::new();
    t.created_at = chrono::DateTime::<chrono::Utc>::MIN_UTC;
    for record in &mut t.records {
        record.latency_ms = 0;
    }
    t
}
