use serde::{Deserialize, Serialize};

use crate::template::Template;

/// One log message, optionally with its ground-truth template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Zero-based row index within its dataset.
    pub line_id: usize,
    pub content: String,
    pub ground_truth: Option<Template>,
    pub event_id: Option<String>,
}

impl LogRecord {
    pub fn new(line_id: usize, content: impl Into<String>) -> Self {
        Self {
            line_id,
            content: content.into(),
            ground_truth: None,
            event_id: None,
        }
    }

    pub fn with_ground_truth(mut self, template: Template, event_id: Option<String>) -> Self {
        self.ground_truth = Some(template);
        self.event_id = event_id;
        self
    }
}
