//! Two-column stage/text table rendering, mirroring the breakdown format
//! a run trace is meant to be read in: user input first, then one row per
//! stage.

use fslm_core::trace::{Trace, TraceStatus};

const TEXT_WIDTH: usize = 72;

/// `final_output` -> `Final output`.
pub fn section_label(stage_name: &str) -> String {
    let spaced = stage_name.replace('_', " ");
    let mut chars = spaced.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => spaced,
    }
}

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    for raw_line in text.split('\n') {
        if raw_line.chars().count() <= width {
            lines.push(raw_line.to_string());
            continue;
        }
        let mut current = String::new();
        let mut current_len = 0usize;
        for word in raw_line.split(' ') {
            let word_len = word.chars().count();
            if current_len > 0 && current_len + 1 + word_len > width {
                lines.push(std::mem::take(&mut current));
                current_len = 0;
            }
            if current_len > 0 {
                current.push(' ');
                current_len += 1;
            }
            current.push_str(word);
            current_len += word_len;
        }
        lines.push(current);
    }
    if lines.is_empty() {
        lines.push(String::new());
    }
    lines
}

/// Render a trace as a stage table. With `show_backends` a third column
/// carries each stage's backend id (used by the chat `/trace` view, where
/// hot-swaps need to be visible).
pub fn render_trace_table(trace: &Trace, show_backends: bool) -> String {
    let mut rows: Vec<(String, String, String)> = Vec::new();
    rows.push((
        "User input".to_string(),
        String::new(),
        trace.user_input.clone(),
    ));
    for record in &trace.records {
        let text = if record.cleaned_output.is_empty() {
            match &trace.status {
                TraceStatus::FailedAtStage(stage) if *stage == record.stage_name => {
                    "(stage failed: no output)".to_string()
                }
                _ => String::new(),
            }
        } else {
            record.cleaned_output.clone()
        };
        rows.push((
            section_label(&record.stage_name),
            record.backend_id.clone(),
            text,
        ));
    }

    let label_width = rows
        .iter()
        .map(|(label, _, _)| label.chars().count())
        .max()
        .unwrap_or(7)
        .max("Section".len());
    let backend_width = rows
        .iter()
        .map(|(_, backend, _)| backend.chars().count())
        .max()
        .unwrap_or(7)
        .max("Backend".len());

    let mut out = String::new();
    let header = if show_backends {
        format!(
            "{:<label_width$} | {:<backend_width$} | Text",
            "Section", "Backend"
        )
    } else {
        format!("{:<label_width$} | Text", "Section")
    };
    out.push_str(&header);
    out.push('\n');
    let rule_len = header.chars().count().max(label_width + 3 + TEXT_WIDTH);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');

    for (label, backend, text) in &rows {
        for (index, line) in wrap(text, TEXT_WIDTH).iter().enumerate() {
            let (label_cell, backend_cell) = if index == 0 {
                (label.as_str(), backend.as_str())
            } else {
                ("", "")
            };
            if show_backends {
                out.push_str(&format!(
                    "{label_cell:<label_width$} | {backend_cell:<backend_width$} | {line}\n"
                ));
            } else {
                out.push_str(&format!("{label_cell:<label_width$} | {line}\n"));
            }
        }
    }

    if let TraceStatus::FailedAtStage(stage) = &trace.status {
        out.push_str(&format!("\nFAILED at stage `{stage}`\n"));
    }
    out
}
