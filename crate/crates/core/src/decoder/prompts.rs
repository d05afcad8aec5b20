//! Built-in prompt templates for the two streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const QUESTION_SLOT: &str = "{question}";

/// `(key, template)`; templates with a `{question}` slot need a question.
pub const TEMPLATES: &[(&str, &str)] = &[
    ("caption.instruction", "Describe the image in detail.\nCaption:"),
    (
        "caption.evidence",
        "Describe ONLY what is clearly visible in the image. Do not guess.\nCaption:",
    ),
    (
        "yesno.instruction",
        "Answer the question based on the image. Answer only yes or no.\nQuestion: {question}\nAnswer:",
    ),
    (
        "yesno.evidence",
        "Answer the question using only visible evidence in the image.\nDo not guess. Answer only yes or no.\nQuestion: {question}\nAnswer:",
    ),
    (
        "openqa.instruction",
        "Answer the visual question briefly.\nQuestion: {question}\nAnswer:",
    ),
    (
        "openqa.evidence",
        "Answer ONLY using visible information from the image.\nDo not assume anything.\nQuestion: {question}\nAnswer:",
    ),
];

pub fn template(template_id: &str) -> Option<&'static str> {
    TEMPLATES
        .iter()
        .find(|(k, _)| *k == template_id)
        .map(|(_, t)| *t)
}

pub fn render_prompt(template_id: &str, question: Option<&str>) -> Result<String> {
    let t = template(template_id)
        .ok_or_else(|| Error::Input(format!("unknown prompt template {template_id:?}")))?;
    if !t.contains(QUESTION_SLOT) {
        return Ok(t.to_string());
    }
    match question {
        Some(q) if !q.is_empty() => Ok(t.replace(QUESTION_SLOT, q)),
        _ => Err(Error::Input(format!("template {template_id:?} requires a question"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub instruction_prompt: String,
    pub evidence_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

impl PromptPair {
    pub fn new(instruction: impl Into<String>, evidence: impl Into<String>) -> Result<Self> {
        let p = Self {
            instruction_prompt: instruction.into(),
            evidence_prompt: evidence.into(),
            template_id: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Instantiates `<family>.instruction` and `<family>.evidence`, where
    /// family is `caption`, `yesno` or `openqa`.
    pub fn from_registry(family: &str, question: Option<&str>) -> Result<Self> {
        Ok(Self {
            instruction_prompt: render_prompt(&format!("{family}.instruction"), question)?,
            evidence_prompt: render_prompt(&format!("{family}.evidence"), question)?,
            template_id: Some(family.to_string()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction_prompt.is_empty() || self.evidence_prompt.is_empty() {
            return Err(Error::Input("both prompts must be non-empty".into()));
        }
        Ok(())
    }
}
