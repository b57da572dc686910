//! Few-shot log parsing with a completion model.
//!
//! Pipeline: embed every log, pick a small diverse candidate set with greedy
//! DPP MAP inference, have it labeled, then for each log retrieve the most
//! similar labeled candidates, build a prompt, and extract the template the
//! model writes between locator tokens.

mod append;
pub mod backend;
pub mod config;
pub mod dpp;
pub mod embedding;
mod exec;
pub mod formats;
mod http;
pub mod log_record;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod selector;
pub mod template;

pub use backend::{BackendError, CompletionBackend, CompletionRequest, HttpBackend, MockBackend, ReplayBackend, ReplayStore};
pub use config::PipelineConfig;
pub use dpp::{greedy_map, sample_candidates, DppError, DppSelection, Execution};
pub use embedding::{cosine_similarity, Embedding, EmbeddingError, EmbeddingService, Encoder, NgramEncoder};
pub use http::RetryPolicy;
pub use log_record::LogRecord;
pub use metrics::{evaluate, EvaluationReport, EvaluationRow, MetricsError};
pub use pipeline::{LogParser, ParseSettings, PipelineError};
pub use prompt::{build_prompt, extract_template, ExtractionMode, PromptConfig, PromptError};
pub use selector::{select_examples, Candidate, Example, Permutation, SelectionError, SelectionResult};
pub use template::{match_template, ParameterList, Template, TemplateError};
