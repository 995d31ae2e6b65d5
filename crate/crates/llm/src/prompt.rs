use std::path::Path;

use lara_core::Grade;
use serde::{Deserialize, Serialize};

use crate::LlmError;

pub const PLACEHOLDERS: [&str; 4] = ["topic_title", "topic_description", "document_text", "grade_list"];

/// A prompt with `{name}` placeholders. `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    /// When set, the grade is read from the token after this marker instead
    /// of from the first generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_marker: Option<String>,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            answer_marker: None,
        }
    }

    pub fn with_answer_marker(mut self, marker: impl Into<String>) -> Self {
        self.answer_marker = Some(marker.into());
        self
    }

    pub fn base() -> Self {
        Self::new("base", include_str!("../templates/base.txt"))
    }

    pub fn rationale() -> Self {
        Self::new("rationale", include_str!("../templates/rationale.txt")).with_answer_marker("Answer:")
    }

    pub fn utility() -> Self {
        Self::new("utility", include_str!("../templates/utility.txt"))
    }

    /// `base`, `rationale` or `utility`.
    pub fn builtin(id: &str) -> Option<Self> {
        match id {
            "base" => Some(Self::base()),
            "rationale" => Some(Self::rationale()),
            "utility" => Some(Self::utility()),
            _ => None,
        }
    }

    /// Loads a template file; the id is the file stem.
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let t = Self::new(id, text);
        t.check()?;
        Ok(t)
    }

    /// Fails on an unknown or unterminated placeholder.
    pub fn check(&self) -> Result<(), LlmError> {
        self.substitute(|name| PLACEHOLDERS.contains(&name).then(String::new)).map(|_| ())
    }

    fn substitute(&self, mut value: impl FnMut(&str) -> Option<String>) -> Result<String, LlmError> {
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(i) = rest.find(['{', '}']) {
            out.push_str(&rest[..i]);
            let tail = &rest[i..];
            if tail.starts_with("{{") || tail.starts_with("}}") {
                out.push_str(&tail[..1]);
                rest = &tail[2..];
                continue;
            }
            if tail.starts_with('}') {
                return Err(LlmError::MissingField("}".into()));
            }
            let Some(end) = tail.find('}') else {
                return Err(LlmError::MissingField(tail.to_string()));
            };
            let name = &tail[1..end];
            match value(name) {
                Some(v) => out.push_str(&v),
                None => return Err(LlmError::MissingField(name.to_string())),
            }
            rest = &tail[end + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }

    pub fn render(
        &self,
        topic_title: &str,
        topic_description: &str,
        document_text: &str,
        max_grade: Grade,
    ) -> Result<String, LlmError> {
        if topic_title.trim().is_empty() {
            return Err(LlmError::MissingField("topic_title".into()));
        }
        if document_text.trim().is_empty() {
            return Err(LlmError::MissingField("document_text".into()));
        }
        self.substitute(|name| match name {
            "topic_title" => Some(topic_title.to_string()),
            "topic_description" => Some(topic_description.to_string()),
            "document_text" => Some(document_text.to_string()),
            "grade_list" => Some(grade_list(max_grade)),
            _ => None,
        })
    }
}

/// `"0, 1, 2"` for `l = 2`.
pub fn grade_list(max_grade: Grade) -> String {
    (0..=max_grade).map(|g| g.to_string()).collect::<Vec<_>>().join(", ")
}
