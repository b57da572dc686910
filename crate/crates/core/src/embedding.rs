//! Text embeddings, cosine similarity, and a persistent embedding cache.
//!
//! Every [`Embedding`] is L2-normalized on construction, so the Gram matrix
//! of a set of embeddings is positive semidefinite with a unit diagonal.

use std::collections::hash_map::{Entry, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::append;
use crate::exec;
use crate::http::{HttpFailure, JsonClient, RetryPolicy};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("encoder returned a zero or non-finite vector")]
    DegenerateEmbedding,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A unit-length embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn new(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::DegenerateEmbedding);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Plain inner product. Equals the cosine similarity for unit vectors.
    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `aᵀb / (‖a‖₂‖b‖₂)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    if a.dimension() != b.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dimension(),
            right: b.dimension(),
        });
    }
    let denom = l2_norm(&a.0) * l2_norm(&b.0);
    Ok((dot(&a.0, &b.0) / denom).clamp(-1.0, 1.0))
}

/// A text encoder.
///
/// Implementations must be deterministic: the same `backend_id` and input
/// text always yield the same vector.
pub trait Encoder: Send + Sync {
    /// Identifies the encoder and its parameters; part of every cache key.
    fn backend_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Raw (not necessarily normalized) vectors, one per input.
    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

pub const DEFAULT_NGRAM_DIMENSION: usize = 1024;
pub const DEFAULT_NGRAM_SIZE: usize = 3;

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hashed character n-gram term-frequency encoder.
///
/// Each n-gram (over Unicode scalar values) increments the bucket
/// `fnv1a(utf8) mod dimension`. Text shorter than `n` characters counts as a
/// single feature.
#[derive(Debug, Clone)]
pub struct NgramEncoder {
    dimension: usize,
    n: usize,
    id: String,
}

impl NgramEncoder {
    pub fn new(dimension: usize, n: usize) -> Result<Self, EmbeddingError> {
        if dimension < 64 {
            return Err(EmbeddingError::InvalidConfig(format!(
                "n-gram dimension must be at least 64, got {dimension}"
            )));
        }
        if n < 2 {
            return Err(EmbeddingError::InvalidConfig(format!(
                "n-gram size must be at least 2, got {n}"
            )));
        }
        Ok(Self {
            dimension,
            n,
            id: format!("ngram-fnv1a-v1:n={n}:d={dimension}"),
        })
    }

    /// Bucket indices of every n-gram in `text`, with repetition.
    pub fn features(&self, text: &str) -> Vec<usize> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        if chars.len() < self.n {
            return vec![self.bucket(text)];
        }
        (0..=chars.len() - self.n)
            .map(|start| {
                let from = chars[start].0;
                let to = chars
                    .get(start + self.n)
                    .map_or(text.len(), |(offset, _)| *offset);
                self.bucket(&text[from..to])
            })
            .collect()
    }

    fn bucket(&self, gram: &str) -> usize {
        (fnv1a(gram.as_bytes()) % self.dimension as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut tf = vec![0.0; self.dimension];
        for idx in self.features(text) {
            tf[idx] += 1.0;
        }
        tf
    }
}

impl Default for NgramEncoder {
    fn default() -> Self {
        Self::new(DEFAULT_NGRAM_DIMENSION, DEFAULT_NGRAM_SIZE).expect("valid defaults")
    }
}

impl Encoder for NgramEncoder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(exec::map(texts, |t| self.encode(t)))
    }
}

/// Computes the normalized n-gram embedding of `text`.
pub fn local_ngram_embed(text: &str, dimension: usize, n: usize) -> Result<Embedding, EmbeddingError> {
    if text.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    Embedding::new(NgramEncoder::new(dimension, n)?.encode(text))
}

#[derive(Debug, Clone)]
pub struct HttpEncoderConfig {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dimension: usize,
    pub batch_size: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub requests_per_second: Option<f64>,
    pub max_in_flight: usize,
}

/// Remote embedding service speaking `{model, input: [..]}`.
pub struct HttpEncoder {
    client: JsonClient,
    model: String,
    dimension: usize,
    batch_size: usize,
    id: String,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

/// Accepts either a bare `[[f64]]` or the `{"data": [{"embedding": [..]}]}` envelope.
#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingResponse {
    Bare(Vec<Vec<f64>>),
    Envelope { data: Vec<EmbeddingDatum> },
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl HttpEncoder {
    pub fn new(config: HttpEncoderConfig) -> Result<Self, EmbeddingError> {
        if config.dimension == 0 || config.batch_size == 0 {
            return Err(EmbeddingError::InvalidConfig(
                "dimension and batch_size must be positive".into(),
            ));
        }
        let client = JsonClient::new(
            config.url.clone(),
            config.api_key,
            config.retry,
            config.timeout,
            config.requests_per_second,
            config.max_in_flight,
        )
        .map_err(EmbeddingError::InvalidConfig)?;
        Ok(Self {
            id: format!("http:{}:{}", config.model, config.url),
            client,
            model: config.model,
            dimension: config.dimension,
            batch_size: config.batch_size,
        })
    }

    fn request(&self, batch: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let body = EmbeddingRequest { model: &self.model, input: batch };
        let response: EmbeddingResponse = self.client.post(&body).map_err(|f| match f {
            HttpFailure::Exhausted(e) => EmbeddingError::EncoderUnavailable(e),
            HttpFailure::Rejected(status, text) => {
                EmbeddingError::EncoderUnavailable(format!("status {status}: {text}"))
            }
            HttpFailure::Decode(e) => EmbeddingError::EncoderUnavailable(format!("bad response: {e}")),
        })?;
        let vectors = match response {
            EmbeddingResponse::Bare(v) => v,
            EmbeddingResponse::Envelope { mut data } => {
                if data.iter().all(|d| d.index.is_some()) {
                    data.sort_by_key(|d| d.index);
                }
                data.into_iter().map(|d| d.embedding).collect()
            }
        };
        if vectors.len() != batch.len() {
            return Err(EmbeddingError::EncoderUnavailable(format!(
                "expected {} vectors, got {}",
                batch.len(),
                vectors.len()
            )));
        }
        for v in &vectors {
            if v.len() != self.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    left: self.dimension,
                    right: v.len(),
                });
            }
        }
        Ok(vectors)
    }
}

impl Encoder for HttpEncoder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn encode_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let batches: Vec<&[&str]> = texts.chunks(self.batch_size).collect();
        let results = exec::map(&batches, |b| self.request(b));
        let mut out = Vec::with_capacity(texts.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

const CACHE_FORMAT: &str = "logprompt-embedding-cache";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    backend: String,
    sha256: String,
    vector: Vec<f64>,
}

type CacheKey = (String, [u8; 32]);

fn content_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// In-memory embedding map, optionally backed by an append-only file.
///
/// The file starts with a `{"format": .., "version": 1}` header line followed
/// by one JSON record per line: `{"backend", "sha256", "vector"}`, where
/// `sha256` is the hex digest of the UTF-8 text.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<CacheKey, Arc<Embedding>>>,
    file: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            file: None,
        }
    }

    /// Opens (or creates) a cache file, loading every stored record.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| EmbeddingError::Cache { path: path.clone(), source };
        let mut entries = HashMap::new();
        let mut needs_header = true;

        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io_err)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if n == 0 {
                    let header: CacheHeader = serde_json::from_str(&line).map_err(|e| {
                        io_err(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
                    })?;
                    if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
                        return Err(io_err(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("unsupported cache {} v{}", header.format, header.version),
                        )));
                    }
                    needs_header = false;
                    continue;
                }
                let Ok(record) = serde_json::from_str::<CacheRecord>(&line) else {
                    log::warn!("{}: skipping unreadable record on line {}", path.display(), n + 1);
                    continue;
                };
                let mut hash = [0u8; 32];
                if hex::decode_to_slice(&record.sha256, &mut hash).is_err() {
                    continue;
                }
                entries.insert((record.backend, hash), Arc::new(Embedding(record.vector)));
            }
        }

        let file = append::open_lines(&path).map_err(io_err)?;
        let mut writer = BufWriter::new(file);
        if needs_header {
            let header = CacheHeader {
                format: CACHE_FORMAT.into(),
                version: CACHE_VERSION,
            };
            serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::from).map_err(io_err)?;
            writer.write_all(b"\n").map_err(io_err)?;
            writer.flush().map_err(io_err)?;
        }
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some((path, Mutex::new(writer))),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, backend_id: &str, text: &str) -> Option<Arc<Embedding>> {
        let key = (backend_id.to_owned(), content_hash(text));
        self.entries.read().unwrap().get(&key).cloned()
    }

    fn insert_many(&self, backend_id: &str, items: Vec<(&str, Embedding)>) -> Result<(), EmbeddingError> {
        let mut fresh = Vec::new();
        {
            let mut map = self.entries.write().unwrap();
            for (text, emb) in items {
                let key = (backend_id.to_owned(), content_hash(text));
                if let Entry::Vacant(slot) = map.entry(key) {
                    let emb = Arc::new(emb);
                    fresh.push((slot.key().1, emb.clone()));
                    slot.insert(emb);
                }
            }
        }
        if let Some((path, writer)) = &self.file {
            let io_err = |source| EmbeddingError::Cache { path: path.clone(), source };
            let mut w = writer.lock().unwrap();
            for (hash, emb) in fresh {
                let record = CacheRecord {
                    backend: backend_id.to_owned(),
                    sha256: hex::encode(hash),
                    vector: emb.0.clone(),
                };
                serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from).map_err(io_err)?;
                w.write_all(b"\n").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        Ok(())
    }
}

/// An encoder fronted by a cache; the entry point for embedding text.
pub struct EmbeddingService {
    encoder: Box<dyn Encoder>,
    cache: EmbeddingCache,
}

impl EmbeddingService {
    pub fn new(encoder: Box<dyn Encoder>, cache: EmbeddingCache) -> Self {
        Self { encoder, cache }
    }

    pub fn backend_id(&self) -> &str {
        self.encoder.backend_id()
    }

    pub fn dimension(&self) -> usize {
        self.encoder.dimension()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed(&self, text: &str) -> Result<Arc<Embedding>, EmbeddingError> {
        Ok(self.embed_all(&[text])?.remove(0))
    }

    /// Embeds every text, encoding only cache misses (each distinct text once).
    pub fn embed_all(&self, texts: &[&str]) -> Result<Vec<Arc<Embedding>>, EmbeddingError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let id = self.encoder.backend_id().to_owned();
        let mut misses: Vec<&str> = Vec::new();
        {
            let mut seen = std::collections::HashSet::new();
            for &t in texts {
                if self.cache.get(&id, t).is_none() && seen.insert(t) {
                    misses.push(t);
                }
            }
        }
        if !misses.is_empty() {
            let raw = self.encoder.encode_batch(&misses)?;
            let mut fresh = Vec::with_capacity(raw.len());
            for (text, values) in misses.iter().zip(raw) {
                if values.len() != self.encoder.dimension() {
                    return Err(EmbeddingError::DimensionMismatch {
                        left: self.encoder.dimension(),
                        right: values.len(),
                    });
                }
                fresh.push((*text, Embedding::new(values)?));
            }
            self.cache.insert_many(&id, fresh)?;
        }
        texts
            .iter()
            .map(|t| {
                self.cache
                    .get(&id, t)
                    .ok_or_else(|| EmbeddingError::EncoderUnavailable("cache lost an entry".into()))
            })
            .collect()
    }
}
