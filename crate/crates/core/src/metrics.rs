//! Parsing accuracy (PA) and template accuracy (PTA / RTA).
//!
//! A message is correctly parsed when its predicted template equals the
//! ground truth exactly. A ground-truth template is correctly identified
//! when every message carrying it is correctly parsed. PTA divides the
//! correctly identified count by the number of distinct predicted templates,
//! RTA by the number of distinct ground-truth templates.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::Template;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("line id {0} appears more than once")]
    DuplicateLineId(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluationRow {
    pub line_id: usize,
    pub ground_truth: Template,
    /// `None` when no template could be extracted; never counts as correct.
    pub predicted: Option<Template>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBreakdown {
    pub template: String,
    pub messages: usize,
    pub correct: usize,
    pub identified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub pa: f64,
    pub pta: f64,
    pub rta: f64,
    pub messages_total: usize,
    pub messages_correct: usize,
    pub identified_templates: usize,
    pub correct_templates: usize,
    pub ground_truth_templates: usize,
    pub extraction_failures: usize,
    /// Set when no template was predicted at all; PTA is then reported as 0.
    pub pta_undefined: bool,
    pub templates: Vec<TemplateBreakdown>,
}

pub fn evaluate(rows: &[EvaluationRow]) -> Result<EvaluationReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut ids = HashSet::with_capacity(rows.len());
    for r in rows {
        if !ids.insert(r.line_id) {
            return Err(MetricsError::DuplicateLineId(r.line_id));
        }
    }

    let mut per_template: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut predicted: BTreeSet<&str> = BTreeSet::new();
    let mut messages_correct = 0;
    let mut extraction_failures = 0;
    for r in rows {
        let ok = r.predicted.as_ref() == Some(&r.ground_truth);
        let slot = per_template.entry(r.ground_truth.as_str()).or_default();
        slot.0 += 1;
        if ok {
            slot.1 += 1;
            messages_correct += 1;
        }
        match &r.predicted {
            Some(p) => {
                predicted.insert(p.as_str());
            }
            None => extraction_failures += 1,
        }
    }

    let templates: Vec<TemplateBreakdown> = per_template
        .into_iter()
        .map(|(t, (messages, correct))| TemplateBreakdown {
            template: t.to_owned(),
            messages,
            correct,
            identified: messages == correct,
        })
        .collect();
    let correct_templates = templates.iter().filter(|t| t.identified).count();
    let identified_templates = predicted.len();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    Ok(EvaluationReport {
        pa: ratio(messages_correct, rows.len()),
        pta: ratio(correct_templates, identified_templates),
        rta: ratio(correct_templates, templates.len()),
        messages_total: rows.len(),
        messages_correct,
        identified_templates,
        correct_templates,
        ground_truth_templates: templates.len(),
        extraction_failures,
        pta_undefined: identified_templates == 0,
        templates,
    })
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8} {:>14}", "metric", "value", "count")?;
        writeln!(
            f,
            "{:<8} {:>8.4} {:>14}",
            "PA",
            self.pa,
            format!("{}/{}", self.messages_correct, self.messages_total)
        )?;
        let pta = if self.pta_undefined { " (none identified)" } else { "" };
        writeln!(
            f,
            "{:<8} {:>8.4} {:>14}{pta}",
            "PTA",
            self.pta,
            format!("{}/{}", self.correct_templates, self.identified_templates)
        )?;
        writeln!(
            f,
            "{:<8} {:>8.4} {:>14}",
            "RTA",
            self.rta,
            format!("{}/{}", self.correct_templates, self.ground_truth_templates)
        )?;
        if self.extraction_failures > 0 {
            writeln!(f, "extraction failures: {}", self.extraction_failures)?;
        }
        Ok(())
    }
}
