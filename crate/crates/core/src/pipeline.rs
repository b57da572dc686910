//! End-to-end stages: candidate sampling, per-log parsing, evaluation and
//! ablation sweeps.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, CompletionBackend, CompletionRequest};
use crate::dpp::{sample_log_candidates, CandidateSample, DppError};
use crate::embedding::{Embedding, EmbeddingError, EmbeddingService};
use crate::exec;
use crate::formats::{CandidateRow, ParseRow, ParseStatus};
use crate::log_record::LogRecord;
use crate::metrics::{evaluate, EvaluationReport, EvaluationRow, MetricsError};
use crate::prompt::{build_prompt, default_max_tokens, extract_template, PromptConfig, PromptError};
use crate::selector::{select_examples, Candidate, Permutation, SelectionError, DEFAULT_EXAMPLES};
use crate::template::{match_template, normalize_whitespace, ParameterList, Template};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("candidate rows without labels: {0:?}")]
    MissingLabels(Vec<usize>),
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("parse output has no row for dataset lines {0:?}")]
    Join(Vec<usize>),
    #[error("dataset line {0} has no ground-truth template")]
    MissingGroundTruth(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Runs candidate sampling over a dataset and returns the rows to label,
/// sorted by line id, together with the raw selection.
pub fn sample_for_labeling(
    dataset: &[LogRecord],
    embeddings: &EmbeddingService,
    k: usize,
) -> Result<(Vec<CandidateRow>, CandidateSample), PipelineError> {
    let texts: Vec<&str> = dataset.iter().map(|r| r.content.as_str()).collect();
    let vectors = embeddings.embed_all(&texts)?;
    let sample = sample_log_candidates(dataset, &vectors, k)?;
    let mut picked = sample.indices.clone();
    picked.sort_unstable();
    let rows = picked
        .into_iter()
        .map(|i| CandidateRow {
            line_id: dataset[i].line_id,
            content: dataset[i].content.clone(),
            template: String::new(),
        })
        .collect();
    Ok((rows, sample))
}

/// Fills candidate labels from the dataset's ground truth.
pub fn label_from_ground_truth(rows: &mut [CandidateRow], dataset: &[LogRecord]) -> Result<(), PipelineError> {
    let by_id: HashMap<usize, &LogRecord> = dataset.iter().map(|r| (r.line_id, r)).collect();
    for row in rows {
        let gt = by_id
            .get(&row.line_id)
            .and_then(|r| r.ground_truth.as_ref())
            .ok_or(PipelineError::MissingGroundTruth(row.line_id))?;
        row.template = gt.to_string();
    }
    Ok(())
}

/// Embeds labeled candidate rows.
pub fn build_candidates(rows: &[CandidateRow], embeddings: &EmbeddingService) -> Result<Vec<Candidate>, PipelineError> {
    if rows.is_empty() {
        return Err(PipelineError::NoCandidates);
    }
    let unlabeled: Vec<usize> = rows.iter().filter(|r| r.label().is_none()).map(|r| r.line_id).collect();
    if !unlabeled.is_empty() {
        return Err(PipelineError::MissingLabels(unlabeled));
    }
    let texts: Vec<&str> = rows.iter().map(|r| r.content.as_str()).collect();
    let vectors = embeddings.embed_all(&texts)?;
    Ok(rows
        .iter()
        .zip(vectors)
        .map(|(r, embedding)| Candidate {
            record: LogRecord::new(r.line_id, r.content.clone()),
            label: r.label().expect("checked above"),
            embedding,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseSettings {
    pub examples: usize,
    pub permutation: Permutation,
    pub exclude_identical: bool,
    pub prompt: PromptConfig,
    pub model: String,
    /// Overrides the per-query default completion budget.
    pub max_tokens: Option<u32>,
    /// Stop generation at the end locator.
    pub stop_at_end_locator: bool,
    /// Re-ask once with a doubled budget when extraction fails.
    pub retry_failed_extraction: bool,
    pub parallelism: usize,
}

impl Default for ParseSettings {
    fn default() -> Self {
        Self {
            examples: DEFAULT_EXAMPLES,
            permutation: Permutation::Ascending,
            exclude_identical: true,
            prompt: PromptConfig::default(),
            model: "mock".into(),
            max_tokens: None,
            stop_at_end_locator: true,
            retry_failed_extraction: false,
            parallelism: 4,
        }
    }
}

/// Everything produced while parsing one log.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub line_id: usize,
    pub prompt: String,
    pub raw_completion: String,
    pub predicted: Option<Template>,
    pub parameters: ParameterList,
    pub status: ParseStatus,
    pub example_ids: Vec<usize>,
    pub error: Option<String>,
}

impl ParseOutcome {
    fn empty(line_id: usize, status: ParseStatus) -> Self {
        Self {
            line_id,
            prompt: String::new(),
            raw_completion: String::new(),
            predicted: None,
            parameters: ParameterList::default(),
            status,
            example_ids: Vec::new(),
            error: None,
        }
    }

    pub fn to_row(&self) -> ParseRow {
        ParseRow {
            line_id: self.line_id,
            predicted: self.predicted.clone(),
            parameters: self.parameters.clone(),
            status: self.status,
            example_ids: self.example_ids.clone(),
        }
    }
}

pub struct LogParser<'a> {
    embeddings: &'a EmbeddingService,
    backend: &'a dyn CompletionBackend,
    settings: ParseSettings,
}

impl<'a> LogParser<'a> {
    pub fn new(
        embeddings: &'a EmbeddingService,
        backend: &'a dyn CompletionBackend,
        settings: ParseSettings,
    ) -> Result<Self, PipelineError> {
        if settings.examples == 0 {
            return Err(PipelineError::Config("example count must be at least 1".into()));
        }
        settings.prompt.validate()?;
        Ok(Self {
            embeddings,
            backend,
            settings,
        })
    }

    pub fn settings(&self) -> &ParseSettings {
        &self.settings
    }

    /// Parses every query; output order follows `queries`.
    pub fn parse(&self, queries: &[LogRecord], candidates: &[Candidate]) -> Result<Vec<ParseOutcome>, PipelineError> {
        if candidates.is_empty() {
            return Err(PipelineError::NoCandidates);
        }
        let texts: Vec<&str> = queries.iter().map(|r| r.content.as_str()).collect();
        let vectors = self.embeddings.embed_all(&texts)?;
        let work: Vec<(&LogRecord, Arc<Embedding>)> = queries.iter().zip(vectors).collect();
        let results = exec::with_threads(self.settings.parallelism, || {
            exec::map(&work, |(q, v)| self.parse_one(q, v, candidates))
        });
        results.into_iter().collect()
    }

    /// Select, prompt, complete, extract, match.
    pub fn parse_one(
        &self,
        query: &LogRecord,
        query_vec: &Embedding,
        candidates: &[Candidate],
    ) -> Result<ParseOutcome, PipelineError> {
        let s = &self.settings;
        let mut selection = match select_examples(query, query_vec, candidates, s.examples, s.exclude_identical) {
            Ok(sel) => sel,
            Err(SelectionError::NoCandidates(_)) => {
                return Ok(ParseOutcome::empty(query.line_id, ParseStatus::NoExamples));
            }
            Err(e) => return Err(e.into()),
        };

        let stop = (s.stop_at_end_locator && s.prompt.extraction.uses_locators())
            .then(|| vec![s.prompt.end_locator.clone()]);
        let max_tokens = s.max_tokens.unwrap_or_else(|| default_max_tokens(&query.content));

        let (prompt, examples, mut request, raw) = loop {
            let examples = selection.arranged(s.permutation);
            let prompt = build_prompt(&examples, query, &s.prompt)?;
            let request = CompletionRequest {
                model: s.model.clone(),
                prompt: prompt.text.clone(),
                max_tokens,
                temperature: 0.0,
                stop: stop.clone(),
            };
            match self.backend.complete(&request) {
                Ok(raw) => break (prompt, examples, request, raw),
                Err(BackendError::PromptTooLong(msg)) => {
                    if !selection.drop_least_similar() {
                        let mut out = ParseOutcome::empty(query.line_id, ParseStatus::BackendError);
                        out.prompt = prompt.text;
                        out.example_ids = examples.iter().map(|e| e.line_id).collect();
                        out.error = Some(format!("prompt too long: {msg}"));
                        return Ok(out);
                    }
                    log::debug!("query {}: prompt too long, dropping an example", query.line_id);
                }
                Err(e) => {
                    log::error!("query {}: {e}", query.line_id);
                    let mut out = ParseOutcome::empty(query.line_id, ParseStatus::BackendError);
                    out.prompt = prompt.text;
                    out.example_ids = examples.iter().map(|e| e.line_id).collect();
                    out.error = Some(e.to_string());
                    return Ok(out);
                }
            }
        };

        let mut raw_completion = raw;
        let mut extracted = extract_template(&self.close_stopped(&raw_completion, &request), &s.prompt);
        if extracted.is_err() && s.retry_failed_extraction {
            request.max_tokens = request.max_tokens.saturating_mul(2);
            if let Ok(again) = self.backend.complete(&request) {
                extracted = extract_template(&self.close_stopped(&again, &request), &s.prompt);
                raw_completion = again;
            }
        }

        let mut out = ParseOutcome {
            line_id: query.line_id,
            prompt: prompt.text,
            raw_completion,
            predicted: None,
            parameters: ParameterList::default(),
            status: ParseStatus::ExtractionFailed,
            example_ids: examples.iter().map(|e| e.line_id).collect(),
            error: None,
        };
        match extracted {
            Ok(template) => {
                match match_template(&normalize_whitespace(&query.content), &template) {
                    Some(params) => {
                        out.parameters = params;
                        out.status = ParseStatus::Ok;
                    }
                    None => out.status = ParseStatus::Unmatched,
                }
                out.predicted = Some(template);
            }
            Err(e) => out.error = Some(e.to_string()),
        }
        Ok(out)
    }

    /// A stop sequence strips the end locator from the output; put it back.
    fn close_stopped(&self, raw: &str, request: &CompletionRequest) -> String {
        let cfg = &self.settings.prompt;
        let stopped = request.stop.as_ref().is_some_and(|s| s.contains(&cfg.end_locator));
        match raw.find(&cfg.start_locator) {
            Some(open) if stopped && !raw[open..].contains(&cfg.end_locator) => {
                format!("{raw} {}", cfg.end_locator)
            }
            _ => raw.to_owned(),
        }
    }
}

/// Joins parse rows with the dataset's ground truth and computes the metrics.
pub fn evaluate_parse(rows: &[ParseRow], dataset: &[LogRecord]) -> Result<EvaluationReport, PipelineError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyEvaluation.into());
    }
    let by_id: HashMap<usize, &ParseRow> = rows.iter().map(|r| (r.line_id, r)).collect();
    let missing: Vec<usize> = dataset
        .iter()
        .map(|r| r.line_id)
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::Join(missing));
    }
    let known: HashMap<usize, &LogRecord> = dataset.iter().map(|r| (r.line_id, r)).collect();
    let extra: Vec<usize> = rows.iter().map(|r| r.line_id).filter(|id| !known.contains_key(id)).collect();
    if !extra.is_empty() {
        return Err(PipelineError::Join(extra));
    }
    let eval_rows = dataset
        .iter()
        .map(|r| {
            let ground_truth = r
                .ground_truth
                .clone()
                .ok_or(PipelineError::MissingGroundTruth(r.line_id))?;
            Ok(EvaluationRow {
                line_id: r.line_id,
                ground_truth,
                predicted: by_id[&r.line_id].predicted.clone(),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(evaluate(&eval_rows)?)
}

/// Prompt orders compared by an ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationMode {
    Ascending,
    Descending,
    Random,
}

impl PermutationMode {
    pub fn with_seed(self, seed: u64) -> Permutation {
        match self {
            PermutationMode::Ascending => Permutation::Ascending,
            PermutationMode::Descending => Permutation::Descending,
            PermutationMode::Random => Permutation::Random { seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Example counts `k`.
    pub examples: Vec<usize>,
    /// Candidate-set sizes `K`. Empty means the full labeled set.
    #[serde(default)]
    pub candidates: Vec<usize>,
    #[serde(default = "default_permutations")]
    pub permutations: Vec<PermutationMode>,
    /// Runs per random-order cell.
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_permutations() -> Vec<PermutationMode> {
    vec![PermutationMode::Ascending]
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn validate(&self, labeled: usize) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.examples.is_empty() || self.permutations.is_empty() {
            return bad("sweep needs at least one example count and one permutation".into());
        }
        if let Some(k) = self.examples.iter().find(|&&k| !(1..=9).contains(&k)) {
            return bad(format!("example count {k} outside 1..=9"));
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        let max_k = *self.examples.iter().max().expect("non-empty");
        for &c in &self.candidates {
            if c < max_k {
                return bad(format!("candidate count {c} is smaller than example count {max_k}"));
            }
            if c > labeled {
                return bad(format!("candidate count {c} exceeds the {labeled} labeled candidates"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub pa: f64,
    pub pta: f64,
    pub rta: f64,
}

impl From<&EvaluationReport> for Scores {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            pa: r.pa,
            pta: r.pta,
            rta: r.rta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub candidates: usize,
    pub examples: usize,
    pub permutation: PermutationMode,
    pub runs: Vec<Scores>,
    pub mean: Scores,
}

/// Evaluates every (K, k, order) combination of `sweep`.
///
/// A smaller candidate set of size `K` is the first `K` greedy picks over the
/// dataset; greedy selection is prefix-stable, so those picks are a subset of
/// the labeled set when the labeled set was sampled the same way.
pub fn ablate(
    dataset: &[LogRecord],
    labeled: &[CandidateRow],
    embeddings: &EmbeddingService,
    backend: &dyn CompletionBackend,
    base: &ParseSettings,
    sweep: &SweepSpec,
) -> Result<Vec<AblationCell>, PipelineError> {
    sweep.validate(labeled.len())?;
    let all = build_candidates(labeled, embeddings)?;

    let mut pools: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    if sweep.candidates.is_empty() {
        pools.insert(all.len(), all.clone());
    } else {
        let texts: Vec<&str> = dataset.iter().map(|r| r.content.as_str()).collect();
        let vectors = embeddings.embed_all(&texts)?;
        let position: HashMap<usize, usize> = all.iter().enumerate().map(|(i, c)| (c.record.line_id, i)).collect();
        for &size in &sweep.candidates {
            let sample = sample_log_candidates(dataset, &vectors, size)?;
            let mut ids: Vec<usize> = sample.indices.iter().map(|&i| dataset[i].line_id).collect();
            ids.sort_unstable();
            let pool = ids
                .iter()
                .map(|id| {
                    position.get(id).map(|&p| all[p].clone()).ok_or_else(|| {
                        PipelineError::Config(format!("line {id} is picked for K={size} but is not labeled"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            pools.insert(size, pool);
        }
    }

    let mut cells = Vec::new();
    for (&size, pool) in &pools {
        for &k in &sweep.examples {
            for &mode in &sweep.permutations {
                let repeats = if mode == PermutationMode::Random { sweep.repeats } else { 1 };
                let mut runs = Vec::with_capacity(repeats);
                for r in 0..repeats {
                    let settings = ParseSettings {
                        examples: k,
                        permutation: mode.with_seed(sweep.seed.wrapping_add(r as u64)),
                        ..base.clone()
                    };
                    let parser = LogParser::new(embeddings, backend, settings)?;
                    let rows: Vec<ParseRow> = parser.parse(dataset, pool)?.iter().map(ParseOutcome::to_row).collect();
                    runs.push(Scores::from(&evaluate_parse(&rows, dataset)?));
                }
                let n = runs.len() as f64;
                let mean = Scores {
                    pa: runs.iter().map(|s| s.pa).sum::<f64>() / n,
                    pta: runs.iter().map(|s| s.pta).sum::<f64>() / n,
                    rta: runs.iter().map(|s| s.rta).sum::<f64>() / n,
                };
                cells.push(AblationCell {
                    candidates: size,
                    examples: k,
                    permutation: mode,
                    runs,
                    mean,
                });
            }
        }
    }
    Ok(cells)
}
