//! Completion backends.
//!
//! [`CompletionBackend`] is a blocking, thread-safe handle. Three
//! implementations are provided: a remote HTTP completion client, a
//! deterministic mock that answers with the label of the last example in the
//! prompt, and a record/replay wrapper keyed by a hash of the request.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::append;
use crate::http::{HttpFailure, JsonClient, RetryPolicy};
use crate::prompt::{example_labels, PromptConfig};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("completion backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("prompt exceeds the model context: {0}")]
    PromptTooLong(String),
    #[error("replay store {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            stop: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.is_empty() {
            return Err(BackendError::InvalidRequest("empty prompt".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the request's canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

pub trait CompletionBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// Suffix the mock appends after the template.
pub const MOCK_SUFFIX: &str = "\nDone.";

/// Answers with the label of the prompt's last example.
///
/// Output is `"<START> label <END>\nDone."` (or `"label\nDone."` without
/// locators), or the empty string when the prompt holds no examples.
pub struct MockBackend {
    config: PromptConfig,
}

impl MockBackend {
    pub fn new(config: PromptConfig) -> Self {
        Self { config }
    }
}

impl CompletionBackend for MockBackend {
    fn backend_id(&self) -> &str {
        "mock-last-example-v1"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        let Some(label) = example_labels(&request.prompt, &self.config).pop() else {
            return Ok(String::new());
        };
        let body = if self.config.extraction.uses_locators() {
            self.config.wrap(&label)
        } else {
            label.to_string()
        };
        Ok(format!("{body}{MOCK_SUFFIX}"))
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub requests_per_second: Option<f64>,
    pub max_in_flight: usize,
}

/// A completion-style HTTP endpoint returning `{"choices": [{"text": ..}]}`.
pub struct HttpBackend {
    client: JsonClient,
    id: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = JsonClient::new(
            config.url.clone(),
            config.api_key,
            config.retry,
            config.timeout,
            config.requests_per_second,
            config.max_in_flight,
        )
        .map_err(BackendError::InvalidRequest)?;
        Ok(Self {
            client,
            id: format!("http:{}", config.url),
        })
    }
}

fn is_context_overflow(status: u16, body: &str) -> bool {
    let body = body.to_ascii_lowercase();
    matches!(status, 400 | 413)
        && (body.contains("context length") || body.contains("maximum context") || body.contains("too long"))
}

impl CompletionBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        let response: CompletionResponse = self.client.post(request).map_err(|f| match f {
            HttpFailure::Exhausted(e) => BackendError::BackendUnavailable(e),
            HttpFailure::Rejected(status, body) if is_context_overflow(status, &body) => {
                BackendError::PromptTooLong(body)
            }
            HttpFailure::Rejected(status, body) => {
                BackendError::BackendUnavailable(format!("status {status}: {body}"))
            }
            HttpFailure::Decode(e) => BackendError::BackendUnavailable(format!("bad response: {e}")),
        })?;
        response
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::BackendUnavailable("response has no choices".into()))
    }
}

const REPLAY_FORMAT: &str = "logprompt-replay";
const REPLAY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ReplayHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    request_hash: String,
    model_id: String,
    response: String,
}

/// Append-only store of completions keyed by request fingerprint.
///
/// Line-delimited JSON: a `{"format": "logprompt-replay", "version": 1}`
/// header, then `{"request_hash", "model_id", "response"}` per line. When a
/// hash appears twice the first record wins.
pub struct ReplayStore {
    path: PathBuf,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<BufWriter<File>>,
}

impl ReplayStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| BackendError::Store { path: path.clone(), source };
        let invalid = |msg: String| io_err(std::io::Error::new(std::io::ErrorKind::InvalidData, msg));
        let mut entries = HashMap::new();
        let mut needs_header = true;
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path).map_err(io_err)?).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if n == 0 {
                    let header: ReplayHeader = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
                    if header.format != REPLAY_FORMAT || header.version != REPLAY_VERSION {
                        return Err(invalid(format!("unsupported store {} v{}", header.format, header.version)));
                    }
                    needs_header = false;
                    continue;
                }
                match serde_json::from_str::<ReplayRecord>(&line) {
                    Ok(r) => {
                        entries.entry(r.request_hash).or_insert(r.response);
                    }
                    Err(_) => log::warn!("{}: skipping unreadable record on line {}", path.display(), n + 1),
                }
            }
        }
        let file = append::open_lines(&path).map_err(io_err)?;
        let mut writer = BufWriter::new(file);
        if needs_header {
            let header = ReplayHeader {
                format: REPLAY_FORMAT.into(),
                version: REPLAY_VERSION,
            };
            serde_json::to_writer(&mut writer, &header).map_err(|e| invalid(e.to_string()))?;
            writer.write_all(b"\n").map_err(io_err)?;
            writer.flush().map_err(io_err)?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Mutex::new(writer),
            path,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, request: &CompletionRequest) -> Option<String> {
        self.entries.read().unwrap().get(&request.fingerprint()).cloned()
    }

    pub fn record(&self, request: &CompletionRequest, response: &str) -> Result<(), BackendError> {
        let hash = request.fingerprint();
        {
            let mut map = self.entries.write().unwrap();
            if map.contains_key(&hash) {
                return Ok(());
            }
            map.insert(hash.clone(), response.to_owned());
        }
        let record = ReplayRecord {
            request_hash: hash,
            model_id: request.model.clone(),
            response: response.to_owned(),
        };
        let io_err = |source| BackendError::Store { path: self.path.clone(), source };
        let mut w = self.writer.lock().unwrap();
        serde_json::to_writer(&mut *w, &record).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// Serves recorded completions; misses go to `live` (and are recorded) or fail.
pub struct ReplayBackend {
    store: ReplayStore,
    live: Option<Box<dyn CompletionBackend>>,
    id: String,
}

impl ReplayBackend {
    pub fn new(store: ReplayStore, live: Option<Box<dyn CompletionBackend>>) -> Self {
        let id = match &live {
            Some(b) => format!("replay+{}", b.backend_id()),
            None => "replay-offline".to_owned(),
        };
        Self { store, live, id }
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }
}

impl CompletionBackend for ReplayBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        if let Some(hit) = self.store.lookup(request) {
            return Ok(hit);
        }
        let Some(live) = &self.live else {
            return Err(BackendError::BackendUnavailable(format!(
                "request {} not recorded and no live backend configured",
                request.fingerprint()
            )));
        };
        let response = live.complete(request)?;
        self.store.record(request, &response)?;
        Ok(response)
    }
}
