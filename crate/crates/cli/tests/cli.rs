//! End-to-end exit-code contract: 0 success, 1 operational failure,
//! 2 usage error — across every subcommand.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn fslm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fslm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fslm_with_stdin(args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_fslm"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary spawns");
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().expect("binary exits")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn scripted_config() -> String {
    repo_root()
        .join("configs/fslm_scripted.json")
        .display()
        .to_string()
}

fn temp_traces(dir: &Path) -> String {
    dir.join("traces.jsonl").display().to_string()
}

#[test]
fn validate_ok_config_exits_zero() {
    let out = fslm(&["validate", "--config", &scripted_config()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "OK");
}

#[test]
fn validate_reports_violations_one_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{
            "name": "bad", "version": "1",
            "stages": [
                {"name": "a", "template": "{stage.b} first", "backend_ref": "e"},
                {"name": "b", "template": "{user_input}", "backend_ref": "e"}
            ],
            "backends": {"e": {"kind": "echo", "marker": "E"}}
        }"#,
    )
    .unwrap();
    let out = fslm(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("`a`") && lines[0].contains("`b`"), "{lines:?}");
}

#[test]
fn validate_without_config_is_usage_error() {
    let out = fslm(&["validate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn validate_missing_file_is_usage_error() {
    let out = fslm(&["validate", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = fslm(&["validate", "--confog", "x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_with_empty_input_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "run",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--input",
        "   ",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_prints_table_and_final_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "run",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--input",
        "What are ways to stay healthy?",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for label in ["User input", "Instruction", "Search term", "Explanation", "Final output"] {
        assert!(text.contains(label), "missing {label} in:\n{text}");
    }
    assert!(text.trim_end().ends_with(
        "Healthy eating is a key component of maintaining a healthy lifestyle."
    ));
}

#[test]
fn run_stop_after_prints_a_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "run",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--input",
        "What are ways to stay healthy?",
        "--stop-after",
        "search_term",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("Instruction"));
    assert!(text.contains("Search term"));
    assert!(!text.contains("Explanation"));
}

#[test]
fn run_stop_after_unknown_stage_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "run",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--input",
        "x",
        "--stop-after",
        "nope",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn distill_oversized_sample_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "distill",
        "--config",
        &scripted_config(),
        "--seeds",
        repo_root().join("fixtures/alpaca_seeds.json").to_str().unwrap(),
        "--teacher",
        "teacher",
        "--n",
        "9",
        "--seed",
        "42",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("exceeds"), "{}", stderr(&out));
}

#[test]
fn distill_unknown_teacher_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "distill",
        "--config",
        &scripted_config(),
        "--seeds",
        repo_root().join("fixtures/alpaca_seeds.json").to_str().unwrap(),
        "--teacher",
        "nonexistent",
        "--n",
        "8",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn distill_writes_datasets_and_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = fslm(&[
        "distill",
        "--config",
        &scripted_config(),
        "--seeds",
        repo_root().join("fixtures/alpaca_seeds.json").to_str().unwrap(),
        "--teacher",
        "teacher",
        "--n",
        "8",
        "--seed",
        "42",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("ok=8 rejected=0"));
    for stage in ["instruction", "search_term", "explanation", "final_output"] {
        assert!(out_dir.join(format!("{stage}.train.jsonl")).exists());
    }
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn distill_with_unresponsive_teacher_rejects_everything_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // A teacher with no rules rejects every seed at the first meta prompt.
    std::fs::write(
        dir.path().join("mute_rules.json"),
        r#"{"generate_rules": [], "loglikelihood_rules": []}"#,
    )
    .unwrap();
    let config_path = dir.path().join("stack.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{
  "name": "mute_demo", "version": "1",
  "stages": [
    {{"name": "instruction", "template": "Write a one-line instruction that addresses this request.\nRequest: {{user_input}}\nInstruction:", "backend_ref": "model"}},
    {{"name": "final_output", "template": "Request: {{user_input}}\nContext: {{stage.instruction}}\nResponse:", "backend_ref": "model"}}
  ],
  "backends": {{
    "model": {{"kind": "scripted", "path": "{rules}"}},
    "mute": {{"kind": "scripted", "path": "mute_rules.json"}}
  }}
}}"#,
            rules = repo_root().join("fixtures/table2_rules.json").display()
        ),
    )
    .unwrap();

    let out = fslm(&[
        "distill",
        "--config",
        config_path.to_str().unwrap(),
        "--seeds",
        repo_root().join("fixtures/alpaca_seeds.json").to_str().unwrap(),
        "--teacher",
        "mute",
        "--n",
        "8",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stdout(&out).contains("ok=0 rejected=8"), "{}", stdout(&out));
}

#[test]
fn eval_demo_task_is_perfect_and_emits_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(&[
        "eval",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--task",
        repo_root().join("fixtures/demo_task.jsonl").to_str().unwrap(),
        "--name",
        "demo",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("demo fslm_scripted acc=1.0000"));
    assert!(dir.path().join("demo.fslm_scripted.report.json").exists());
}

#[test]
fn eval_with_unsupported_backend_aborts_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("echo.json");
    std::fs::write(
        &config_path,
        r#"{
            "name": "echo_only", "version": "1",
            "stages": [{"name": "final_output", "template": "{user_input}", "backend_ref": "e"}],
            "backends": {"e": {"kind": "echo", "marker": "E"}}
        }"#,
    )
    .unwrap();
    let out = fslm(&[
        "eval",
        "--config",
        config_path.to_str().unwrap(),
        "--traces",
        &temp_traces(dir.path()),
        "--task",
        repo_root().join("fixtures/demo_task.jsonl").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unsupported"), "{}", stderr(&out));
    assert!(
        !dir.path().join("demo_task.echo_only.report.json").exists(),
        "no partial report on abort"
    );
}

#[test]
fn eval_converts_arc_style_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let task = dir.path().join("arc.jsonl");
    std::fs::write(
        &task,
        r#"{"id": "a1", "question": "Which habit most supports staying healthy?", "choices": {"text": ["Eating a balanced diet", "Skipping sleep every night"], "label": ["A", "B"]}, "answerKey": "A"}"#,
    )
    .unwrap();
    let out = fslm(&[
        "eval",
        "--config",
        &scripted_config(),
        "--traces",
        &temp_traces(dir.path()),
        "--task",
        task.to_str().unwrap(),
        "--task-format",
        "arc",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("acc=1.0000"));
}

#[test]
fn inspect_lists_and_prints_traces() {
    let dir = tempfile::tempdir().unwrap();
    let traces = temp_traces(dir.path());
    for _ in 0..3 {
        let out = fslm(&[
            "run",
            "--config",
            &scripted_config(),
            "--traces",
            &traces,
            "--input",
            "What are ways to stay healthy?",
        ]);
        assert_eq!(code(&out), 0);
    }

    let list = fslm(&["inspect", "--traces", &traces, "--last", "2"]);
    assert_eq!(code(&list), 0);
    assert_eq!(stdout(&list).trim().lines().count(), 2);

    let id = stdout(&list)
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();
    let show = fslm(&["inspect", "--traces", &traces, "--id", &id]);
    assert_eq!(code(&show), 0);
    assert!(stdout(&show).contains("Final output"));

    let missing = fslm(&["inspect", "--traces", &traces, "--id", "ffff"]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn inspect_missing_trace_file_is_usage_error() {
    let out = fslm(&["inspect", "--traces", "/nonexistent/traces.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn inspect_marks_failed_traces_prominently() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("empty_rules.json"),
        r#"{"generate_rules": [], "loglikelihood_rules": []}"#,
    )
    .unwrap();
    let config_path = dir.path().join("broken.json");
    std::fs::write(
        &config_path,
        r#"{
            "name": "broken", "version": "1",
            "stages": [{"name": "final_output", "template": "{user_input}", "backend_ref": "s"}],
            "backends": {"s": {"kind": "scripted", "path": "empty_rules.json"}}
        }"#,
    )
    .unwrap();
    let traces = temp_traces(dir.path());
    let run = fslm(&[
        "run",
        "--config",
        config_path.to_str().unwrap(),
        "--traces",
        &traces,
        "--input",
        "anything",
    ]);
    assert_eq!(code(&run), 1);

    let list = fslm(&["inspect", "--traces", &traces]);
    assert_eq!(code(&list), 0);
    assert!(stdout(&list).contains("FAILED at `final_output`"), "{}", stdout(&list));

    let id = stdout(&list)
        .split_whitespace()
        .next()
        .unwrap()
        .to_string();
    let show = fslm(&["inspect", "--traces", &traces, "--id", &id]);
    assert!(stdout(&show).contains("FAILED at stage `final_output`"), "{}", stdout(&show));
}

#[test]
fn chat_quits_cleanly_and_renders_swapped_backend() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm_with_stdin(
        &[
            "chat",
            "--config",
            &scripted_config(),
            "--traces",
            &temp_traces(dir.path()),
            "--deterministic",
        ],
        "What are ways to stay healthy?\n/trace\n/swap explanation explanation_alt\nWhat are ways to stay healthy?\n/trace\n/quit\n",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Healthy eating is a key component"));
    assert!(text.contains("explanation_alt"), "swap visible in /trace");
}

#[test]
fn chat_eof_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm_with_stdin(
        &[
            "chat",
            "--config",
            &scripted_config(),
            "--traces",
            &temp_traces(dir.path()),
        ],
        "",
    );
    assert_eq!(code(&out), 0);
}

#[test]
fn chat_continues_after_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("broken.json");
    // No rule matches: the first stage fails on every message.
    std::fs::write(
        &config_path,
        format!(
            r#"{{
                "name": "broken", "version": "1",
                "stages": [{{"name": "final_output", "template": "{{user_input}}", "backend_ref": "s"}}],
                "backends": {{"s": {{"kind": "scripted", "path": "{}"}}}}
            }}"#,
            dir.path().join("empty_rules.json").display()
        ),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("empty_rules.json"),
        r#"{"generate_rules": [], "loglikelihood_rules": []}"#,
    )
    .unwrap();
    let out = fslm_with_stdin(
        &[
            "chat",
            "--config",
            config_path.to_str().unwrap(),
            "--traces",
            &temp_traces(dir.path()),
        ],
        "hello\n/quit\n",
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("failed"), "{}", stdout(&out));
}
