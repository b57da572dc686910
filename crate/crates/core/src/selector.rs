//! Nearest-neighbour example selection.
//!
//! For each query the labeled candidates are ranked by cosine similarity, the
//! top `k` are kept, and the result is stored in ascending order so the most
//! similar example sits right before the query in the prompt.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, Embedding, EmbeddingError};
use crate::log_record::LogRecord;
use crate::template::{normalize_whitespace, Template};

pub const DEFAULT_EXAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("example count must be at least 1")]
    InvalidK,
    #[error("no usable candidates for query {0}")]
    NoCandidates(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A labeled candidate log.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: LogRecord,
    pub label: Template,
    pub embedding: Arc<Embedding>,
}

/// One selected example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// Position in the candidate list.
    pub candidate: usize,
    pub line_id: usize,
    pub content: String,
    pub label: Template,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub query_id: usize,
    /// Ascending by similarity; the last entry is the closest candidate.
    pub examples: Vec<Example>,
}

/// Order in which examples are laid out in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Permutation {
    #[default]
    Ascending,
    Descending,
    Random { seed: u64 },
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// The examples in prompt order for `permutation`.
    ///
    /// Random orders are seeded by both the configured seed and the query id,
    /// so each query gets its own reproducible shuffle.
    pub fn arranged(&self, permutation: Permutation) -> Vec<Example> {
        let mut out = self.examples.clone();
        match permutation {
            Permutation::Ascending => {}
            Permutation::Descending => out.reverse(),
            Permutation::Random { seed } => {
                let mixed = seed ^ (self.query_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                out.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
            }
        }
        out
    }

    /// Removes the least similar example, returning false if none is left to drop.
    pub fn drop_least_similar(&mut self) -> bool {
        if self.examples.len() <= 1 {
            return false;
        }
        self.examples.remove(0);
        true
    }
}

/// Ranks candidates for `query` and returns the `k` most similar.
///
/// With `exclude_identical`, candidates whose whitespace-normalized content
/// equals the query's are skipped and the scan continues down the ranking.
pub fn select_examples(
    query: &LogRecord,
    query_vec: &Embedding,
    candidates: &[Candidate],
    k: usize,
    exclude_identical: bool,
) -> Result<SelectionResult, SelectionError> {
    if k == 0 {
        return Err(SelectionError::InvalidK);
    }
    let query_text = exclude_identical.then(|| normalize_whitespace(&query.content));
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.iter().enumerate() {
        if let Some(q) = &query_text {
            if normalize_whitespace(&cand.record.content) == *q {
                continue;
            }
        }
        ranked.push((i, cosine_similarity(query_vec, &cand.embedding)?));
    }
    if ranked.is_empty() {
        return Err(SelectionError::NoCandidates(query.line_id));
    }
    if ranked.len() < k {
        log::warn!(
            "query {}: only {} usable candidates for {k} examples",
            query.line_id,
            ranked.len()
        );
    }
    ranked.sort_by(|a, b| rank_order(*a, *b));
    ranked.truncate(k);
    ranked.reverse();

    let examples = ranked
        .into_iter()
        .map(|(i, similarity)| {
            let c = &candidates[i];
            Example {
                candidate: i,
                line_id: c.record.line_id,
                content: c.record.content.clone(),
                label: c.label.clone(),
                similarity,
            }
        })
        .collect();
    Ok(SelectionResult {
        query_id: query.line_id,
        examples,
    })
}

/// Descending similarity, then ascending candidate index.
fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
