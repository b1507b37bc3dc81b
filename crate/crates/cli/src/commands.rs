//! Subcommand implementations. Each returns the process exit code or a
//! [`CliError`] carrying the exit-code class; all machine-readable output
//! (traces, reports, datasets) comes straight from the library so CLI and
//! API behavior cannot drift apart.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use fslm_core::backend::{resolve_backends, BackendSet};
use fslm_core::config::{
    parse_stack_config, validate_stack_config, GenerationParams, StackConfig,
};
use fslm_core::distill::{
    run_distillation, DistillError, DistillationJobSpec, SeedError,
};
use fslm_core::eval::{
    convert_arc_style, emit_report, load_task, run_eval_with_options, summary_line, EvalError,
    EvalTaskSpec, MCItem, ScoreOptions,
};
use fslm_core::run::{run_stack, swap_stage_backend, RunOptions};
use fslm_core::template::PromptTemplate;
use fslm_core::trace::{load_traces, JsonlTraceSink, Trace, TraceStatus};

use crate::table::render_trace_table;
use crate::{Cli, CliError};

/// Default worker count for distill/eval jobs, matching the backend
/// in-flight cap.
const DEFAULT_WORKERS: usize = 4;

const DEFAULT_META_TEMPLATES: &str = include_str!("../../../configs/teacher_meta_templates.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskFormat {
    /// Native item schema: item_id/question/choices/answer_index.
    Native,
    /// ARC/MMLU-style layout: question/choices/answerKey.
    Arc,
}

fn require_config(cli: &Cli) -> Result<(StackConfig, PathBuf), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".to_string()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|err| CliError::Usage(format!("cannot read {}: {err}", path.display())))?;
    let cfg = parse_stack_config(&text)
        .map_err(|err| CliError::Operational(format!("{}: {err}", path.display())))?;
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base_dir))
}

fn require_valid_config(cli: &Cli) -> Result<(StackConfig, PathBuf), CliError> {
    let (cfg, base_dir) = require_config(cli)?;
    let violations = validate_stack_config(&cfg);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Operational(format!(
            "config is invalid:\n{}",
            lines.join("\n")
        )));
    }
    Ok((cfg, base_dir))
}

fn resolve(cfg: &StackConfig, base_dir: &Path) -> Result<BackendSet, CliError> {
    resolve_backends(cfg, base_dir).map_err(|err| CliError::Operational(err.to_string()))
}

fn open_sink(cli: &Cli) -> Result<JsonlTraceSink, CliError> {
    JsonlTraceSink::open(&cli.traces).map_err(|err| CliError::Operational(err.to_string()))
}

pub fn cmd_validate(cli: &Cli) -> Result<u8, CliError> {
    let (cfg, _) = require_config(cli)?;
    let violations = validate_stack_config(&cfg);
    if violations.is_empty() {
        println!("OK");
        Ok(0)
    } else {
        for violation in &violations {
            println!("{violation}");
        }
        Ok(1)
    }
}

pub fn cmd_run(cli: &Cli, input: &str, stop_after: Option<&str>) -> Result<u8, CliError> {
    if input.trim().is_empty() {
        return Err(CliError::Usage("--input must not be empty".to_string()));
    }
    let (cfg, base_dir) = require_valid_config(cli)?;
    let backends = resolve(&cfg, &base_dir)?;
    let sink = open_sink(cli)?;

    let mut opts = RunOptions::new(&sink);
    if let Some(stage) = stop_after {
        if cfg.stage(stage).is_none() {
            return Err(CliError::Usage(format!(
                "--stop-after names unknown stage `{stage}`"
            )));
        }
        opts.stop_after_stage = Some(stage.to_string());
    }

    let trace = run_stack(&cfg, &backends, input, &opts)
        .map_err(|err| CliError::Operational(err.to_string()))?;

    print!("{}", render_trace_table(&trace, false));
    if cli.verbose {
        eprintln!("trace_id: {}", trace.trace_id);
    }
    match trace.status {
        TraceStatus::Complete => {
            println!("\n{}", trace.final_output);
            Ok(0)
        }
        TraceStatus::FailedAtStage(_) => Ok(1),
    }
}

fn chat_params_for(
    stage_gen: &GenerationParams,
    temperature: f64,
    top_p: f64,
    top_k: u32,
) -> Result<GenerationParams, CliError> {
    GenerationParams::new(
        temperature,
        top_k,
        top_p,
        stage_gen.max_tokens,
        stage_gen.stop.clone(),
        stage_gen.seed,
    )
    .map_err(|err| CliError::Usage(err.to_string()))
}

pub fn cmd_chat(
    cli: &Cli,
    temperature: Option<f64>,
    top_p: Option<f64>,
    top_k: Option<u32>,
    deterministic: bool,
) -> Result<u8, CliError> {
    let (mut cfg, base_dir) = require_valid_config(cli)?;
    let backends = resolve(&cfg, &base_dir)?;
    let sink = open_sink(cli)?;

    // Chat samples by default; batch commands stay greedy. --deterministic
    // pins the session for reproducible transcripts.
    let (temperature, top_p, top_k) = if deterministic {
        (0.0, 1.0, 0)
    } else {
        (
            temperature.unwrap_or(0.7),
            top_p.unwrap_or(0.95),
            top_k.unwrap_or(40),
        )
    };

    let stdin = std::io::stdin();
    let mut last_trace: Option<Trace> = None;
    println!(
        "chat over stack `{}` — /trace, /swap <stage> <backend>, /quit",
        cfg.name
    );
    loop {
        print!("you> ");
        std::io::stdout().flush().ok();
        let mut line = String::new();
        if stdin.lock().read_line(&mut line).unwrap_or(0) == 0 {
            println!();
            return Ok(0); // EOF ends the session like /quit
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }

        if line == "/quit" {
            return Ok(0);
        }
        if line == "/trace" {
            match &last_trace {
                Some(trace) => print!("{}", render_trace_table(trace, true)),
                None => println!("no trace yet — say something first"),
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("/swap ") {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(stage), Some(backend)) => {
                    match swap_stage_backend(&cfg, stage, backend) {
                        Ok(swapped) => {
                            cfg = swapped;
                            println!("stage `{stage}` now served by `{backend}`");
                        }
                        Err(err) => println!("swap failed: {err}"),
                    }
                }
                _ => println!("usage: /swap <stage> <backend>"),
            }
            continue;
        }
        if line.starts_with('/') {
            println!("unknown command `{line}` — /trace, /swap, /quit");
            continue;
        }

        let mut opts = RunOptions::new(&sink);
        for stage in &cfg.stages {
            opts.param_overrides.insert(
                stage.name.clone(),
                chat_params_for(&stage.gen, temperature, top_p, top_k)?,
            );
        }
        match run_stack(&cfg, &backends, line, &opts) {
            Ok(trace) => {
                match &trace.status {
                    TraceStatus::Complete => println!("{}", trace.final_output),
                    TraceStatus::FailedAtStage(stage) => {
                        println!("stage `{stage}` failed; partial trace:");
                        print!("{}", render_trace_table(&trace, true));
                    }
                }
                last_trace = Some(trace);
            }
            Err(err) => println!("run failed: {err}"),
        }
    }
}

fn load_meta_templates(
    path: Option<&Path>,
) -> Result<BTreeMap<String, PromptTemplate>, CliError> {
    let text = match path {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|err| CliError::Usage(format!("cannot read {}: {err}", path.display())))?,
        None => DEFAULT_META_TEMPLATES.to_string(),
    };
    let raw: BTreeMap<String, String> = serde_json::from_str(&text)
        .map_err(|err| CliError::Usage(format!("invalid meta-template file: {err}")))?;
    Ok(raw
        .into_iter()
        .map(|(stage, source)| (stage, PromptTemplate::new(source)))
        .collect())
}

pub fn cmd_distill(
    cli: &Cli,
    seeds: &Path,
    teacher: &str,
    n: usize,
    seed: u64,
    out: &Path,
    meta: Option<&Path>,
) -> Result<u8, CliError> {
    let (cfg, base_dir) = require_valid_config(cli)?;
    let backends = resolve(&cfg, &base_dir)?;
    let teacher_backend = backends.get(teacher).ok_or_else(|| {
        CliError::Usage(format!("--teacher names unknown backend `{teacher}`"))
    })?;
    if !seeds.exists() {
        return Err(CliError::Usage(format!(
            "seed file {} does not exist",
            seeds.display()
        )));
    }

    let job = DistillationJobSpec {
        seed_path: seeds.to_path_buf(),
        config: cfg,
        teacher_backend: teacher.to_string(),
        sample_size: n,
        sample_seed: seed,
        output_dir: out.to_path_buf(),
        teacher_meta_templates: load_meta_templates(meta)?,
    };

    let outcome =
        run_distillation(&job, teacher_backend.as_ref(), DEFAULT_WORKERS).map_err(
            |err| match err {
                DistillError::Sample(e) => CliError::Usage(e.to_string()),
                DistillError::MissingMetaTemplate(stage) => CliError::Usage(format!(
                    "no meta-template for intermediate stage `{stage}` (see --meta)"
                )),
                DistillError::Seed(e @ SeedError::Io { .. }) => CliError::Usage(e.to_string()),
                other => CliError::Operational(other.to_string()),
            },
        )?;

    if outcome.dropped_seeds > 0 {
        eprintln!(
            "warning: dropped {} invalid seed record(s)",
            outcome.dropped_seeds
        );
    }
    let manifest = &outcome.manifest;
    println!("ok={} rejected={}", manifest.ok, manifest.rejected);
    for (reason, count) in &manifest.rejection_reasons {
        println!("  rejected {count} × {reason}");
    }
    println!("wrote {} stage dataset(s) to {}", manifest.stages.len(), out.display());
    Ok(if manifest.ok > 0 { 0 } else { 1 })
}

pub fn cmd_eval(
    cli: &Cli,
    task: &Path,
    name: Option<&str>,
    normalize: bool,
    bypass_stages: bool,
    task_format: TaskFormat,
    out: &Path,
) -> Result<u8, CliError> {
    let (cfg, base_dir) = require_valid_config(cli)?;
    let backends = resolve(&cfg, &base_dir)?;
    let sink = open_sink(cli)?;

    let task_name = name
        .map(str::to_string)
        .or_else(|| {
            task.file_stem()
                .map(|stem| stem.to_string_lossy().into_owned())
        })
        .unwrap_or_else(|| "task".to_string());

    let mut spec = EvalTaskSpec::new(task_name, task);
    spec.normalize_by_length = normalize;

    let items: Vec<MCItem> = match task_format {
        TaskFormat::Native => load_task(&spec).map_err(map_eval_error)?,
        TaskFormat::Arc => {
            let text = std::fs::read_to_string(task).map_err(|err| {
                CliError::Usage(format!("cannot read {}: {err}", task.display()))
            })?;
            convert_arc_style(&text).map_err(map_eval_error)?
        }
    };

    let opts = ScoreOptions {
        trace_sink: &sink,
        choice_format: &spec.choice_format,
        normalize_by_length: spec.normalize_by_length,
        bypass_stages,
    };
    let report = run_eval_with_options(&cfg, &backends, &spec, &items, &opts, DEFAULT_WORKERS)
        .map_err(map_eval_error)?;

    std::fs::create_dir_all(out)
        .map_err(|err| CliError::Operational(format!("cannot create {}: {err}", out.display())))?;
    let report_path = out.join(format!("{}.{}.report.json", report.task_name, report.stack_name));
    let table = emit_report(&report, &report_path).map_err(map_eval_error)?;

    print!("{table}");
    println!("{}", summary_line(&report));
    if cli.verbose {
        eprintln!("report: {}", report_path.display());
    }
    Ok(0)
}

fn map_eval_error(err: EvalError) -> CliError {
    match err {
        EvalError::Io { .. } => CliError::Usage(err.to_string()),
        other => CliError::Operational(other.to_string()),
    }
}

pub fn cmd_inspect(cli: &Cli, id: Option<&str>, last: Option<usize>) -> Result<u8, CliError> {
    if !cli.traces.exists() {
        return Err(CliError::Usage(format!(
            "trace file {} does not exist",
            cli.traces.display()
        )));
    }
    let traces =
        load_traces(&cli.traces).map_err(|err| CliError::Operational(err.to_string()))?;

    match id {
        Some(id) => match traces.iter().find(|t| t.trace_id == id) {
            Some(trace) => {
                print!("{}", render_trace_table(trace, true));
                Ok(0)
            }
            None => Err(CliError::Operational(format!("no trace with id {id}"))),
        },
        None => {
            let skip = last.map_or(0, |k| traces.len().saturating_sub(k));
            for trace in &traces[skip..] {
                let status = match &trace.status {
                    TraceStatus::Complete => "complete".to_string(),
                    TraceStatus::FailedAtStage(stage) => format!("FAILED at `{stage}`"),
                };
                println!(
                    "{}  {}  {}  {}",
                    trace.trace_id,
                    trace.created_at.to_rfc3339(),
                    status,
                    excerpt(&trace.user_input)
                );
            }
            Ok(0)
        }
    }
}

fn excerpt(text: &str) -> String {
    const LIMIT: usize = 48;
    let single_line = text.replace('\n', " ");
    if single_line.chars().count() <= LIMIT {
        return single_line;
    }
    let head: String = single_line.chars().take(LIMIT).collect();
    format!("{head}…")
}
