//! Prompt templates with `{user_input}` / `{stage.<name>}` placeholders.
//!
//! The grammar is strict: every `{` opens a placeholder and every `}` closes
//! one; literal braces are escaped as `{{` and `}}`. A placeholder name is a
//! lowercase identifier (`[a-z][a-z0-9_]*`), optionally prefixed with
//! `stage.` to reference an earlier stage's cleaned output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Map from placeholder name to substitution value.
///
/// Keys are exactly the names that appear between braces, e.g. `user_input`
/// or `stage.explanation`.
pub type Bindings = BTreeMap<String, String>;

/// A prompt template source string. Parsing happens lazily in
/// [`PromptTemplate::placeholders`] and [`PromptTemplate::render`], so
/// values of this type may hold unvalidated text until a config is validated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplate {
    pub source: String,
}

impl PromptTemplate {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
        }
    }

    /// Placeholder names in first-occurrence order, duplicates removed.
    pub fn placeholders(&self) -> Result<Vec<String>, TemplateError> {
        list_placeholders(self)
    }

    /// Substitute every placeholder from `bindings`. Extra bindings are
    /// ignored; a placeholder without a binding is an error.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        render_template(self, bindings)
    }
}

impl From<&str> for PromptTemplate {
    fn from(s: &str) -> Self {
        Self::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unterminated placeholder starting at byte {pos}")]
    Unterminated { pos: usize },
    #[error("invalid placeholder `{{{text}}}` at byte {pos}")]
    InvalidPlaceholder { text: String, pos: usize },
    #[error("single `}}` at byte {pos}; write `}}}}` for a literal brace")]
    LoneCloseBrace { pos: usize },
    #[error("missing binding for placeholder `{0}`")]
    MissingBinding(String),
}

/// One parsed piece of a template: literal text or a placeholder name.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// `true` for `[a-z][a-z0-9_]*`.
fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// `true` for `ident` or `stage.ident`.
fn is_placeholder_name(s: &str) -> bool {
    match s.strip_prefix("stage.") {
        Some(rest) => is_identifier(rest),
        None => is_identifier(s),
    }
}

fn scan(source: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let bytes = source.as_bytes();
    let mut i = 0;

    while i < bytes.len() {
        match bytes[i] {
            b'{' => {
                if bytes.get(i + 1) == Some(&b'{') {
                    literal.push('{');
                    i += 2;
                    continue;
                }
                let start = i + 1;
                let end = match source[start..].find(['{', '}']) {
                    Some(off) if bytes[start + off] == b'}' => start + off,
                    _ => return Err(TemplateError::Unterminated { pos: i }),
                };
                let name = &source[start..end];
                if !is_placeholder_name(name) {
                    return Err(TemplateError::InvalidPlaceholder {
                        text: name.to_string(),
                        pos: i,
                    });
                }
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(name.to_string()));
                i = end + 1;
            }
            b'}' => {
                if bytes.get(i + 1) == Some(&b'}') {
                    literal.push('}');
                    i += 2;
                } else {
                    return Err(TemplateError::LoneCloseBrace { pos: i });
                }
            }
            _ => {
                // Advance one full UTF-8 character.
                let ch = source[i..].chars().next().expect("in-bounds char");
                literal.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    Ok(segments)
}

/// Placeholder names of `t` in first-occurrence order, duplicates removed.
pub fn list_placeholders(t: &PromptTemplate) -> Result<Vec<String>, TemplateError> {
    let mut seen = Vec::new();
    for segment in scan(&t.source)? {
        if let Segment::Placeholder(name) = segment {
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
    }
    Ok(seen)
}

/// Render `t` with `bindings`. Literal text is preserved byte-for-byte,
/// `{{` and `}}` become single braces, and every placeholder must be bound.
pub fn render_template(t: &PromptTemplate, bindings: &Bindings) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(t.source.len());
    for segment in scan(&t.source)? {
        match segment {
            Segment::Literal(text) => out.push_str(&text),
            Segment::Placeholder(name) => match bindings.get(&name) {
                Some(value) => out.push_str(value),
                None => return Err(TemplateError::MissingBinding(name)),
            },
        }
    }
    Ok(out)
}
