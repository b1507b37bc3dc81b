//! `fslm` — run, inspect, and evaluate stacks of small language models.
//!
//! Exit codes: 0 on success, 1 on expected operational failure (validation
//! violations, a failed run, an aborted evaluation), 2 on usage errors
//! (bad flags, missing files, infeasible sample sizes).

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fslm",
    version,
    about = "Build, run, and evaluate stacks of small language models"
)]
struct Cli {
    /// Stack configuration file (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Trace sink / source (append-only JSONL).
    #[arg(long, global = true, default_value = "traces.jsonl")]
    traces: PathBuf,

    /// Print extra diagnostics to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config against every invariant; print violations or OK.
    Validate,

    /// Run the stack once on an input and print the stage table.
    Run {
        /// The user input to run the stack on.
        #[arg(long)]
        input: String,
        /// Stop after this stage completes (partial run).
        #[arg(long)]
        stop_after: Option<String>,
    },

    /// Interactive chat over the stack, with trace display and hot-swap.
    Chat {
        /// Sampling temperature (chat default 0.7).
        #[arg(long)]
        temperature: Option<f64>,
        /// Nucleus sampling mass (chat default 0.95).
        #[arg(long)]
        top_p: Option<f64>,
        /// Top-k cutoff, 0 disables (chat default 40).
        #[arg(long)]
        top_k: Option<u32>,
        /// Force greedy decoding for reproducible sessions.
        #[arg(long)]
        deterministic: bool,
    },

    /// Distill per-stage training datasets from an Alpaca-format seed file.
    Distill {
        /// Alpaca-format JSON seed dataset.
        #[arg(long)]
        seeds: PathBuf,
        /// Backend id (from the config) serving the teacher model.
        #[arg(long)]
        teacher: String,
        /// Number of seeds to subsample.
        #[arg(long, default_value_t = 5000)]
        n: usize,
        /// Subsample RNG seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output directory for `<stage>.train.jsonl` files and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Teacher meta-template file (JSON map stage -> template); defaults
        /// to the templates shipped for the reference stage names.
        #[arg(long)]
        meta: Option<PathBuf>,
    },

    /// Evaluate the stack on a multiple-choice task and emit a report.
    Eval {
        /// Task items file (JSONL).
        #[arg(long)]
        task: PathBuf,
        /// Task name; defaults to the task file stem.
        #[arg(long)]
        name: Option<String>,
        /// Normalize option scores by choice byte length.
        #[arg(long)]
        normalize: bool,
        /// Score options against the final stage alone, skipping the chain.
        #[arg(long)]
        bypass_stages: bool,
        /// Task file layout.
        #[arg(long, value_enum, default_value_t = commands::TaskFormat::Native)]
        task_format: commands::TaskFormat,
        /// Directory for the report JSON.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },

    /// List persisted traces, or print one in full.
    Inspect {
        /// Trace id to print in full.
        #[arg(long)]
        id: Option<String>,
        /// Only list the most recent K traces.
        #[arg(long)]
        last: Option<usize>,
    },
}

/// Errors split by exit-code class.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2: bad invocation — flags, missing files, infeasible requests.
    Usage(String),
    /// Exit 1: the operation ran and failed in an expected way.
    Operational(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are successful outputs, not usage errors.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };

    let outcome = match &cli.command {
        Command::Validate => commands::cmd_validate(&cli),
        Command::Run { input, stop_after } => commands::cmd_run(&cli, input, stop_after.as_deref()),
        Command::Chat {
            temperature,
            top_p,
            top_k,
            deterministic,
        } => commands::cmd_chat(&cli, *temperature, *top_p, *top_k, *deterministic),
        Command::Distill {
            seeds,
            teacher,
            n,
            seed,
            out,
            meta,
        } => commands::cmd_distill(&cli, seeds, teacher, *n, *seed, out, meta.as_deref()),
        Command::Eval {
            task,
            name,
            normalize,
            bypass_stages,
            task_format,
            out,
        } => commands::cmd_eval(
            &cli,
            task,
            name.as_deref(),
            *normalize,
            *bypass_stages,
            *task_format,
            out,
        ),
        Command::Inspect { id, last } => commands::cmd_inspect(&cli, id.as_deref(), *last),
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Operational(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
