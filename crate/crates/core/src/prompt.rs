//! Prompt templates: a fixed preamble, the source text fenced by a dashed
//! delimiter, then the yes/no question.

use serde::Serialize;

/// Fence placed on both sides of the embedded document text.
pub const DELIMITER: &str = "\n--------------\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub template_id: &'static str,
    pub preamble: &'static str,
    pub delimiter: &'static str,
}

pub const CLINICAL_NOTE: PromptTemplate = PromptTemplate {
    template_id: "mimic",
    preamble: "Read the following text from a clinical note:",
    delimiter: DELIMITER,
};

pub const CHEST_XRAY: PromptTemplate = PromptTemplate {
    template_id: "cxr",
    preamble: "Read the following Chest X-ray report:",
    delimiter: DELIMITER,
};

pub const BUILTIN: [PromptTemplate; 2] = [CLINICAL_NOTE, CHEST_XRAY];

pub fn builtin(template_id: &str) -> Option<&'static PromptTemplate> {
    BUILTIN.iter().find(|t| t.template_id == template_id)
}

impl PromptTemplate {
    /// `preamble + delimiter + text + delimiter + question`, with no
    /// normalization of either piece.
    pub fn render(&self, text: &str, question: &str) -> String {
        let mut out = String::with_capacity(
            self.preamble.len() + 2 * self.delimiter.len() + text.len() + question.len(),
        );
        out.push_str(self.preamble);
        out.push_str(self.delimiter);
        out.push_str(text);
        out.push_str(self.delimiter);
        out.push_str(question);
        out
    }
}

/// Recovers the fenced source text from a rendered prompt: everything between
/// the first and the last delimiter.
pub fn embedded_text(prompt: &str) -> Option<&str> {
    let start = prompt.find(DELIMITER)? + DELIMITER.len();
    let end = prompt.rfind(DELIMITER)?;
    (end >= start).then(|| &prompt[start..end])
}
