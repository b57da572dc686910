//! Pipeline configuration.
//!
//! API keys are never part of the configuration; remote backends name the
//! environment variable that holds the key.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{CompletionBackend, HttpBackend, HttpBackendConfig, MockBackend, ReplayBackend, ReplayStore};
use crate::dpp::DEFAULT_CANDIDATES;
use crate::embedding::{
    EmbeddingCache, EmbeddingService, HttpEncoder, HttpEncoderConfig, NgramEncoder, DEFAULT_NGRAM_DIMENSION,
    DEFAULT_NGRAM_SIZE,
};
use crate::http::RetryPolicy;
use crate::pipeline::{ParseSettings, PermutationMode, PipelineError};
use crate::prompt::PromptConfig;
use crate::selector::DEFAULT_EXAMPLES;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    /// Candidate-set size `K`.
    pub candidates: usize,
    /// Examples per prompt `k`.
    pub examples: usize,
    pub permutation: PermutationMode,
    /// Required by the random permutation.
    pub seed: Option<u64>,
    pub exclude_identical: bool,
    pub retry_failed_extraction: bool,
    /// Worker threads for the parse stage.
    pub parallelism: usize,
    pub encoder: EncoderConfig,
    pub completion: CompletionConfig,
    pub prompt: PromptConfig,
    pub cache: CacheConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            candidates: DEFAULT_CANDIDATES,
            examples: DEFAULT_EXAMPLES,
            permutation: PermutationMode::Ascending,
            seed: None,
            exclude_identical: true,
            retry_failed_extraction: false,
            parallelism: 4,
            encoder: EncoderConfig::default(),
            completion: CompletionConfig::default(),
            prompt: PromptConfig::default(),
            cache: CacheConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Ngram {
        #[serde(default = "default_dimension")]
        dimension: usize,
        #[serde(default = "default_ngram")]
        n: usize,
    },
    Http {
        url: String,
        model: String,
        dimension: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        remote: RemoteSettings,
    },
}

fn default_dimension() -> usize {
    DEFAULT_NGRAM_DIMENSION
}

fn default_ngram() -> usize {
    DEFAULT_NGRAM_SIZE
}

fn default_batch() -> usize {
    64
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Ngram {
            dimension: DEFAULT_NGRAM_DIMENSION,
            n: DEFAULT_NGRAM_SIZE,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompletionConfig {
    #[default]
    Mock,
    Http {
        url: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        max_tokens: Option<u32>,
        #[serde(default = "yes")]
        stop_at_end_locator: bool,
        #[serde(default)]
        remote: RemoteSettings,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSettings {
    pub retry_attempts: u32,
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
    pub requests_per_second: Option<f64>,
    pub max_in_flight: usize,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            retry_attempts: 3,
            retry_base_ms: 500,
            timeout_secs: 60,
            requests_per_second: None,
            max_in_flight: 4,
        }
    }
}

impl RemoteSettings {
    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts.max(1),
            base_delay: Duration::from_millis(self.retry_base_ms),
            ..RetryPolicy::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    /// Embedding cache file.
    pub embeddings: Option<PathBuf>,
    /// Completion record/replay file.
    pub replay: Option<PathBuf>,
    /// Serve completions from the replay file only.
    pub offline: bool,
}

fn api_key(var: &str) -> Option<String> {
    match std::env::var(var) {
        Ok(k) if !k.is_empty() => Some(k),
        _ => {
            log::warn!("{var} is not set; sending requests without an API key");
            None
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.examples == 0 {
            return bad("examples must be at least 1");
        }
        if self.candidates < self.examples {
            return bad("candidates must be at least the number of examples");
        }
        if self.permutation == PermutationMode::Random && self.seed.is_none() {
            return bad("random permutation requires an explicit seed");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        if self.cache.offline && self.cache.replay.is_none() {
            return bad("offline mode requires a replay file");
        }
        self.prompt.validate()?;
        Ok(())
    }

    pub fn build_embeddings(&self) -> Result<EmbeddingService, PipelineError> {
        let cache = match &self.cache.embeddings {
            Some(path) => EmbeddingCache::open(path)?,
            None => EmbeddingCache::in_memory(),
        };
        let encoder: Box<dyn crate::embedding::Encoder> = match &self.encoder {
            EncoderConfig::Ngram { dimension, n } => Box::new(NgramEncoder::new(*dimension, *n)?),
            EncoderConfig::Http {
                url,
                model,
                dimension,
                batch_size,
                api_key_env,
                remote,
            } => Box::new(HttpEncoder::new(HttpEncoderConfig {
                url: url.clone(),
                model: model.clone(),
                api_key: api_key(api_key_env),
                dimension: *dimension,
                batch_size: *batch_size,
                retry: remote.retry(),
                timeout: Duration::from_secs(remote.timeout_secs),
                requests_per_second: remote.requests_per_second,
                max_in_flight: remote.max_in_flight,
            })?),
        };
        Ok(EmbeddingService::new(encoder, cache))
    }

    pub fn build_backend(&self) -> Result<Box<dyn CompletionBackend>, PipelineError> {
        let live: Box<dyn CompletionBackend> = match &self.completion {
            CompletionConfig::Mock => Box::new(MockBackend::new(self.prompt.clone())),
            CompletionConfig::Http {
                url,
                api_key_env,
                remote,
                ..
            } => {
                let key = if self.cache.offline { None } else { api_key(api_key_env) };
                Box::new(
                    HttpBackend::new(HttpBackendConfig {
                        url: url.clone(),
                        api_key: key,
                        retry: remote.retry(),
                        timeout: Duration::from_secs(remote.timeout_secs),
                        requests_per_second: remote.requests_per_second,
                        max_in_flight: remote.max_in_flight,
                    })
                    .map_err(|e| PipelineError::Config(e.to_string()))?,
                )
            }
        };
        let Some(path) = &self.cache.replay else {
            return Ok(live);
        };
        let store = ReplayStore::open(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        let live = (!self.cache.offline).then_some(live);
        Ok(Box::new(ReplayBackend::new(store, live)))
    }

    pub fn model_id(&self) -> &str {
        match &self.completion {
            CompletionConfig::Mock => "mock",
            CompletionConfig::Http { model, .. } => model,
        }
    }

    pub fn parse_settings(&self) -> ParseSettings {
        let (max_tokens, stop) = match &self.completion {
            CompletionConfig::Mock => (None, true),
            CompletionConfig::Http {
                max_tokens,
                stop_at_end_locator,
                ..
            } => (*max_tokens, *stop_at_end_locator),
        };
        ParseSettings {
            examples: self.examples,
            permutation: self.permutation.with_seed(self.seed.unwrap_or(0)),
            exclude_identical: self.exclude_identical,
            prompt: self.prompt.clone(),
            model: self.model_id().to_owned(),
            max_tokens,
            stop_at_end_locator: stop,
            retry_failed_extraction: self.retry_failed_extraction,
            parallelism: self.parallelism,
        }
    }
}
