//! Greedy MAP inference for a determinantal point process.
//!
//! Selects a diverse subset of items by repeatedly taking the item with the
//! largest conditional gain `det(L[S ∪ {i}]) / det(L[S])`. The gains are kept
//! incrementally as residuals `d_i²` via a Cholesky-style update: for the
//! newest pick `j`,
//!
//! ```text
//! e_i  = (L_ji - c_jᵀ c_i) / d_j
//! c_i ← [c_i, e_i]
//! d_i² ← d_i² - e_i²
//! ```
//!
//! which costs one kernel row and `O(|S|)` work per item per round, so
//! selecting `K` of `N` items is `O(K²N)` plus `K` kernel rows.

use std::borrow::Borrow;
use std::collections::HashSet;

use nalgebra::DMatrix;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{dot, Embedding};
use crate::log_record::LogRecord;
use crate::template::normalize_whitespace;

/// Default candidate-set size.
pub const DEFAULT_CANDIDATES: usize = 200;
/// Residuals are clamped at zero after each update.
pub const RESIDUAL_FLOOR: f64 = 0.0;
/// Selection stops once the best remaining residual drops below this.
pub const EXHAUSTION_THRESHOLD: f64 = 1e-10;
/// Largest negative conditional gain tolerated by the determinant oracle.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Size limit for the determinant oracle.
pub const BRUTE_FORCE_MAX_ITEMS: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DppError {
    #[error("candidate count must be at least 1")]
    InvalidK,
    #[error("{logs} log records but {embeddings} embeddings")]
    LengthMismatch { logs: usize, embeddings: usize },
    #[error("kernel is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("brute-force oracle limited to {BRUTE_FORCE_MAX_ITEMS} items, got {0}")]
    TooLarge(usize),
    #[error("kernel is not positive semidefinite: item {index} has conditional gain {gain}")]
    KernelNotPsd { index: usize, gain: f64 },
}

/// Symmetric PSD kernel with on-demand entries.
pub trait Kernel: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn entry(&self, i: usize, j: usize) -> f64;
}

/// Cosine kernel over unit embeddings, computed lazily.
///
/// The diagonal is exactly 1 so that ties in the first round resolve by index.
pub struct EmbeddingKernel<'a, E> {
    items: &'a [E],
}

impl<'a, E: Borrow<Embedding>> EmbeddingKernel<'a, E> {
    pub fn new(items: &'a [E]) -> Self {
        Self { items }
    }

    /// Materializes the full matrix.
    pub fn to_dense(&self) -> DMatrix<f64>
    where
        E: Sync,
    {
        let n = self.items.len();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }
}

impl<E: Borrow<Embedding> + Sync> Kernel for EmbeddingKernel<'_, E> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            self.items[i].borrow().dot(self.items[j].borrow())
        }
    }
}

impl Kernel for DMatrix<f64> {
    fn len(&self) -> usize {
        self.nrows()
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        self[(i, j)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Auto,
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

#[derive(Debug, Clone, Default)]
struct Item {
    coeffs: Vec<f64>,
    residual: f64,
    selected: bool,
}

/// Incremental greedy selection state.
pub struct GreedyDpp<'k, K: ?Sized> {
    kernel: &'k K,
    items: Vec<Item>,
    selected: Vec<usize>,
    gains: Vec<f64>,
    /// Latest pick whose kernel row has not been folded into the residuals.
    pending: Option<usize>,
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    parallel: bool,
}

impl<'k, K: Kernel + ?Sized> GreedyDpp<'k, K> {
    pub fn new(kernel: &'k K, execution: Execution) -> Self {
        let items = (0..kernel.len())
            .map(|i| Item {
                coeffs: Vec::new(),
                residual: kernel.entry(i, i).max(RESIDUAL_FLOOR),
                selected: false,
            })
            .collect();
        let parallel = match execution {
            Execution::Sequential => false,
            #[cfg(feature = "parallel")]
            Execution::Parallel => true,
            Execution::Auto => cfg!(feature = "parallel") && kernel.len() >= 512,
        };
        Self {
            kernel,
            items,
            selected: Vec::new(),
            gains: Vec::new(),
            pending: None,
            parallel,
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Residual `d_i²` of every item (frozen at selection time for picked items).
    pub fn residuals(&self) -> Vec<f64> {
        self.items.iter().map(|it| it.residual).collect()
    }

    /// Orthogonal coefficients `c_i` of an item.
    pub fn coefficients(&self, i: usize) -> &[f64] {
        &self.items[i].coeffs
    }

    /// Conditional gain of each pick at the moment it was selected.
    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    /// Lowest-index maximum residual among unselected items.
    fn pivot(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, it) in self.items.iter().enumerate() {
            if it.selected {
                continue;
            }
            if best.is_none_or(|(_, r)| it.residual > r) {
                best = Some((i, it.residual));
            }
        }
        best
    }

    fn update(&mut self, pivot: usize) {
        let pivot_coeffs = self.items[pivot].coeffs.clone();
        let pivot_norm = self.items[pivot].residual.sqrt();
        let kernel = self.kernel;
        let apply = |(i, it): (usize, &mut Item)| {
            if it.selected {
                return;
            }
            let e = (kernel.entry(pivot, i) - dot(&pivot_coeffs, &it.coeffs)) / pivot_norm;
            it.coeffs.push(e);
            it.residual = (it.residual - e * e).max(RESIDUAL_FLOOR);
        };
        #[cfg(feature = "parallel")]
        if self.parallel {
            self.items.par_iter_mut().enumerate().for_each(apply);
            return;
        }
        self.items.iter_mut().enumerate().for_each(apply);
    }

    /// Selects the next item, or `None` when every remaining gain is below
    /// [`EXHAUSTION_THRESHOLD`] or no items remain.
    pub fn step(&mut self) -> Option<usize> {
        if let Some(last) = self.pending.take() {
            self.update(last);
        }
        let (j, residual) = self.pivot()?;
        if residual < EXHAUSTION_THRESHOLD {
            return None;
        }
        self.items[j].selected = true;
        self.selected.push(j);
        self.gains.push(residual);
        self.pending = Some(j);
        Some(j)
    }
}

/// Result of a greedy selection.
#[derive(Debug, Clone, PartialEq)]
pub struct DppSelection {
    /// Picked indices in selection order.
    pub indices: Vec<usize>,
    /// Conditional gain `d_j²` of each pick.
    pub gains: Vec<f64>,
    /// True when the kernel rank ran out before `k` picks.
    pub exhausted: bool,
}

/// Greedily selects up to `k` items from `kernel`.
pub fn greedy_map<K: Kernel + ?Sized>(kernel: &K, k: usize, execution: Execution) -> Result<DppSelection, DppError> {
    if k == 0 {
        return Err(DppError::InvalidK);
    }
    let mut state = GreedyDpp::new(kernel, execution);
    let target = k.min(kernel.len());
    while state.selected().len() < target {
        if state.step().is_none() {
            break;
        }
    }
    let exhausted = state.selected().len() < target;
    if exhausted {
        log::warn!(
            "kernel rank exhausted after {} of {} requested picks",
            state.selected().len(),
            k
        );
    }
    Ok(DppSelection {
        indices: state.selected.clone(),
        gains: state.gains.clone(),
        exhausted,
    })
}

/// Selects `k` mutually diverse embeddings under the cosine kernel.
pub fn sample_candidates<E: Borrow<Embedding> + Sync>(embeddings: &[E], k: usize) -> Result<DppSelection, DppError> {
    greedy_map(&EmbeddingKernel::new(embeddings), k, Execution::Auto)
}

/// Same as [`sample_candidates`] with an explicit execution mode.
pub fn sample_candidates_with<E: Borrow<Embedding> + Sync>(
    embeddings: &[E],
    k: usize,
    execution: Execution,
) -> Result<DppSelection, DppError> {
    greedy_map(&EmbeddingKernel::new(embeddings), k, execution)
}

/// Indices of the first occurrence of each distinct (whitespace-normalized) content.
pub fn first_occurrences(logs: &[LogRecord]) -> Vec<usize> {
    let mut seen = HashSet::new();
    logs.iter()
        .enumerate()
        .filter(|(_, r)| seen.insert(normalize_whitespace(&r.content)))
        .map(|(i, _)| i)
        .collect()
}

/// Candidate picks over a log dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSample {
    /// Dataset indices in selection order.
    pub indices: Vec<usize>,
    pub gains: Vec<f64>,
    /// Number of distinct contents in the dataset.
    pub distinct: usize,
    pub exhausted: bool,
}

/// Deduplicates `logs` by content (first occurrence wins) and selects up to
/// `k` diverse ones. Returned indices refer to `logs`.
pub fn sample_log_candidates<E: Borrow<Embedding> + Sync>(
    logs: &[LogRecord],
    embeddings: &[E],
    k: usize,
) -> Result<CandidateSample, DppError> {
    if logs.len() != embeddings.len() {
        return Err(DppError::LengthMismatch {
            logs: logs.len(),
            embeddings: embeddings.len(),
        });
    }
    if k == 0 {
        return Err(DppError::InvalidK);
    }
    let keep = first_occurrences(logs);
    let unique: Vec<&Embedding> = keep.iter().map(|&i| embeddings[i].borrow()).collect();
    let selection = sample_candidates(&unique, k)?;
    if keep.len() < k {
        log::warn!("only {} distinct log contents for {k} requested candidates", keep.len());
    }
    Ok(CandidateSample {
        indices: selection.indices.iter().map(|&i| keep[i]).collect(),
        gains: selection.gains,
        distinct: keep.len(),
        exhausted: selection.exhausted,
    })
}

/// Reference greedy selection that evaluates every conditional gain as a
/// ratio of principal-minor determinants. Limited to small kernels.
pub fn brute_force_greedy(kernel: &DMatrix<f64>, k: usize) -> Result<DppSelection, DppError> {
    if k == 0 {
        return Err(DppError::InvalidK);
    }
    if !kernel.is_square() {
        return Err(DppError::NotSquare {
            rows: kernel.nrows(),
            cols: kernel.ncols(),
        });
    }
    let n = kernel.nrows();
    if n > BRUTE_FORCE_MAX_ITEMS {
        return Err(DppError::TooLarge(n));
    }
    let minor = |idx: &[usize]| -> f64 {
        if idx.is_empty() {
            return 1.0;
        }
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| kernel[(idx[a], idx[b])]).determinant()
    };

    let mut chosen: Vec<usize> = Vec::new();
    let mut gains = Vec::new();
    let target = k.min(n);
    while chosen.len() < target {
        let base = minor(&chosen);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let mut with = chosen.clone();
            with.push(i);
            let gain = minor(&with) / base;
            if gain < -PSD_TOLERANCE {
                return Err(DppError::KernelNotPsd { index: i, gain });
            }
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        match best {
            Some((i, g)) if g >= EXHAUSTION_THRESHOLD => {
                chosen.push(i);
                gains.push(g);
            }
            _ => break,
        }
    }
    let exhausted = chosen.len() < target;
    if exhausted {
        log::warn!("kernel rank exhausted after {} of {k} requested picks", chosen.len());
    }
    Ok(DppSelection {
        indices: chosen,
        gains,
        exhausted,
    })
}
