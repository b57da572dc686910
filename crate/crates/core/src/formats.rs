//! CSV file formats.
//!
//! * Dataset: structured log CSV with a `Content` column and, for
//!   evaluation, `EventTemplate` (and optionally `EventId`). Other columns are
//!   ignored. Row `n` (zero-based) gets line id `n`.
//! * Candidates: `line_id,content,template`; `template` is blank until a
//!   human labels the row.
//! * Parse output: `line_id,predicted_template,parameters,status,example_ids`
//!   where `parameters` and `example_ids` are JSON arrays.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log_record::LogRecord;
use crate::template::{ParameterList, Template};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {message}")]
    Ingest { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn ingest(row: usize, message: impl Into<String>) -> FormatError {
    FormatError::Ingest {
        row,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File, FormatError> {
    File::open(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, FormatError> {
    File::create(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Reads a structured log dataset.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<LogRecord>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let content = col("Content").ok_or_else(|| ingest(0, "missing Content column"))?;
    let template = col("EventTemplate");
    let event = col("EventId");

    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ingest(row + 1, e.to_string()))?;
        let text = rec.get(content).unwrap_or_default();
        if text.trim().is_empty() {
            return Err(ingest(row + 1, "empty Content"));
        }
        let mut record = LogRecord::new(row, text);
        if let Some(t) = template.and_then(|i| rec.get(i)) {
            if let Ok(t) = Template::normalize(t) {
                let event_id = event.and_then(|i| rec.get(i)).filter(|e| !e.is_empty()).map(str::to_owned);
                record = record.with_ground_truth(t, event_id);
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LogRecord>, FormatError> {
    read_dataset(open(path)?)
}

/// Writes records as `LineId,Content,EventId,EventTemplate`.
pub fn write_dataset<W: Write>(w: W, records: &[LogRecord]) -> Result<(), FormatError> {
    let mut wtr = writer(w);
    wtr.write_record(["LineId", "Content", "EventId", "EventTemplate"])?;
    for r in records {
        let line = (r.line_id + 1).to_string();
        wtr.write_record([
            line.as_str(),
            r.content.as_str(),
            r.event_id.as_deref().unwrap_or(""),
            r.ground_truth.as_ref().map_or("", Template::as_str),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A row of the candidate (labeling) file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub line_id: usize,
    pub content: String,
    #[serde(default)]
    pub template: String,
}

impl CandidateRow {
    pub fn label(&self) -> Option<Template> {
        Template::normalize(&self.template).ok()
    }
}

pub fn read_candidates<R: Read>(reader: R) -> Result<Vec<CandidateRow>, FormatError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| ingest(i + 1, e.to_string())))
        .collect()
}

pub fn load_candidates(path: &Path) -> Result<Vec<CandidateRow>, FormatError> {
    read_candidates(open(path)?)
}

pub fn write_candidates<W: Write>(w: W, rows: &[CandidateRow]) -> Result<(), FormatError> {
    let mut wtr = writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    if rows.is_empty() {
        wtr.write_record(["line_id", "content", "template"])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_candidates(path: &Path, rows: &[CandidateRow]) -> Result<(), FormatError> {
    write_candidates(create(path)?, rows)
}

/// Per-row outcome of the parse stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// Template extracted and it matches the log content.
    Ok,
    /// Template extracted but it does not match the log content.
    Unmatched,
    ExtractionFailed,
    /// Every candidate was excluded for this query.
    NoExamples,
    BackendError,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Ok => "ok",
            ParseStatus::Unmatched => "unmatched",
            ParseStatus::ExtractionFailed => "extraction_failed",
            ParseStatus::NoExamples => "no_examples",
            ParseStatus::BackendError => "backend_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseRow {
    pub line_id: usize,
    pub predicted: Option<Template>,
    pub parameters: ParameterList,
    pub status: ParseStatus,
    /// Line ids of the prompt examples, in prompt order.
    pub example_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParseRecord {
    line_id: usize,
    predicted_template: String,
    parameters: String,
    status: ParseStatus,
    example_ids: String,
}

pub fn write_parse_output<W: Write>(w: W, rows: &[ParseRow]) -> Result<(), FormatError> {
    let mut wtr = writer(w);
    if rows.is_empty() {
        wtr.write_record(["line_id", "predicted_template", "parameters", "status", "example_ids"])?;
    }
    for r in rows {
        wtr.serialize(ParseRecord {
            line_id: r.line_id,
            predicted_template: r.predicted.as_ref().map(|t| t.to_string()).unwrap_or_default(),
            parameters: serde_json::to_string(&r.parameters).expect("strings serialize"),
            status: r.status,
            example_ids: serde_json::to_string(&r.example_ids).expect("ids serialize"),
        })?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_parse_output(path: &Path, rows: &[ParseRow]) -> Result<(), FormatError> {
    write_parse_output(create(path)?, rows)
}

pub fn read_parse_output<R: Read>(reader: R) -> Result<Vec<ParseRow>, FormatError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ParseRecord>().enumerate() {
        let rec = rec.map_err(|e| ingest(i + 1, e.to_string()))?;
        let parameters =
            serde_json::from_str(&rec.parameters).map_err(|e| ingest(i + 1, format!("parameters: {e}")))?;
        let example_ids =
            serde_json::from_str(&rec.example_ids).map_err(|e| ingest(i + 1, format!("example_ids: {e}")))?;
        out.push(ParseRow {
            line_id: rec.line_id,
            predicted: Template::normalize(&rec.predicted_template).ok(),
            parameters,
            status: rec.status,
            example_ids,
        });
    }
    Ok(out)
}

pub fn load_parse_output(path: &Path) -> Result<Vec<ParseRow>, FormatError> {
    read_parse_output(open(path)?)
}
