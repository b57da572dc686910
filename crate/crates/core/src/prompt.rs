//! Prompt assembly and template extraction.
//!
//! A prompt is an instruction followed by one block per example and a final
//! block for the query:
//!
//! ```text
//! <instruction>
//!
//! Log message: <example log>
//! Log template: <START> <example template> <END>
//!
//! Log message: <query log>
//! Log template:
//! ```
//!
//! The model is expected to continue with `<START> ... <END>`; anything after
//! the first closing locator is ignored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log_record::LogRecord;
use crate::selector::Example;
use crate::template::{normalize_whitespace, Template};

pub const LOG_CUE: &str = "Log message:";
pub const TEMPLATE_CUE: &str = "Log template:";
pub const DEFAULT_START: &str = "<START>";
pub const DEFAULT_END: &str = "<END>";
pub const DEFAULT_INSTRUCTION: &str = "Extract the log template of the last log message. \
Keep constant tokens as they are and replace every variable token with <*>, \
writing the template between the same markers used in the examples.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("invalid prompt configuration: {0}")]
    InvalidConfig(String),
    #[error("prompt needs at least one example")]
    NoExamples,
    #[error("text of line {line_id} contains a locator string")]
    LocatorCollision { line_id: usize },
}

/// Completion text from which no template could be recovered.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no template found in model output")]
pub struct ExtractionFailed {
    pub raw: String,
}

/// How templates are marked in examples and recovered from output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractionMode {
    /// Text between the first start locator and the next end locator.
    #[default]
    Locators,
    /// Locators, falling back to the first non-empty output line.
    LocatorsOrFirstLine,
    /// No locators anywhere; the first non-empty output line is the template.
    FirstLine,
}

impl ExtractionMode {
    pub fn uses_locators(self) -> bool {
        !matches!(self, ExtractionMode::FirstLine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub instruction: String,
    pub start_locator: String,
    pub end_locator: String,
    pub extraction: ExtractionMode,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            instruction: DEFAULT_INSTRUCTION.into(),
            start_locator: DEFAULT_START.into(),
            end_locator: DEFAULT_END.into(),
            extraction: ExtractionMode::Locators,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        let (s, e) = (&self.start_locator, &self.end_locator);
        if s.trim().is_empty() || e.trim().is_empty() {
            return Err(PromptError::InvalidConfig("locators must be non-empty".into()));
        }
        if s.contains(e.as_str()) || e.contains(s.as_str()) {
            return Err(PromptError::InvalidConfig(
                "locators must be distinct and not contain each other".into(),
            ));
        }
        if s.contains('\n') || e.contains('\n') {
            return Err(PromptError::InvalidConfig("locators must be single-line".into()));
        }
        if self.extraction.uses_locators() && self.mentions_locator(&self.instruction) {
            return Err(PromptError::InvalidConfig(
                "instruction must not contain a locator string".into(),
            ));
        }
        Ok(())
    }

    fn mentions_locator(&self, text: &str) -> bool {
        text.contains(&self.start_locator) || text.contains(&self.end_locator)
    }

    /// `start + " " + template + " " + end`.
    pub fn wrap(&self, template: &Template) -> String {
        format!("{} {} {}", self.start_locator, template, self.end_locator)
    }
}

/// A fully assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub example_count: usize,
    pub query_content: String,
}

/// Lays out `examples` in the given order, then the query.
pub fn build_prompt(examples: &[Example], query: &LogRecord, config: &PromptConfig) -> Result<Prompt, PromptError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(PromptError::NoExamples);
    }
    let locators = config.extraction.uses_locators();
    let mut text = String::new();
    text.push_str(config.instruction.trim());
    text.push_str("\n\n");
    for ex in examples {
        if locators && (config.mentions_locator(ex.label.as_str()) || config.mentions_locator(&ex.content)) {
            return Err(PromptError::LocatorCollision { line_id: ex.line_id });
        }
        let label = if locators { config.wrap(&ex.label) } else { ex.label.to_string() };
        text.push_str(&format!(
            "{LOG_CUE} {}\n{TEMPLATE_CUE} {label}\n\n",
            normalize_whitespace(&ex.content)
        ));
    }
    let query_content = normalize_whitespace(&query.content);
    if locators && config.mentions_locator(&query_content) {
        return Err(PromptError::LocatorCollision { line_id: query.line_id });
    }
    text.push_str(&format!("{LOG_CUE} {query_content}\n{TEMPLATE_CUE}"));
    Ok(Prompt {
        text,
        example_count: examples.len(),
        query_content,
    })
}

/// Recovers the template from raw model output.
pub fn extract_template(raw_output: &str, config: &PromptConfig) -> Result<Template, ExtractionFailed> {
    let failed = || ExtractionFailed { raw: raw_output.to_owned() };
    match config.extraction {
        ExtractionMode::Locators => between_locators(raw_output, config).ok_or_else(failed),
        ExtractionMode::LocatorsOrFirstLine => between_locators(raw_output, config)
            .or_else(|| first_line(raw_output))
            .ok_or_else(failed),
        ExtractionMode::FirstLine => first_line(raw_output).ok_or_else(failed),
    }
}

fn between_locators(raw: &str, config: &PromptConfig) -> Option<Template> {
    let open = raw.find(&config.start_locator)? + config.start_locator.len();
    let close = raw[open..].find(&config.end_locator)?;
    Template::normalize(&raw[open..open + close]).ok()
}

fn first_line(raw: &str) -> Option<Template> {
    raw.lines().find_map(|l| Template::normalize(l).ok())
}

/// Example labels of a built prompt, in prompt order.
///
/// Reads every `Log template:` line that carries a template; the trailing
/// query cue has none and is skipped.
pub fn example_labels(prompt_text: &str, config: &PromptConfig) -> Vec<Template> {
    prompt_text
        .lines()
        .filter_map(|line| line.strip_prefix(TEMPLATE_CUE))
        .filter_map(|rest| {
            if config.extraction.uses_locators() {
                between_locators(rest, config)
            } else {
                Template::normalize(rest).ok()
            }
        })
        .collect()
}

/// Completion budget: twice the query's token count plus locator headroom.
pub fn default_max_tokens(query_content: &str) -> u32 {
    let tokens = query_content.split_whitespace().count() as u32;
    2 * tokens + 16
}
