//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use logprompt_core::embedding::{EmbeddingCache, EmbeddingService, NgramEncoder};
use logprompt_core::{Embedding, EvaluationRow, LogRecord, Template};
use rand::distr::Alphanumeric;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Embedding> {
    (0..n)
        .map(|_| Embedding::new(gaussian_vector(rng, dim)).expect("non-zero gaussian vector"))
        .collect()
}

pub fn local_service() -> EmbeddingService {
    EmbeddingService::new(Box::new(NgramEncoder::default()), EmbeddingCache::in_memory())
}

/// Plain cosine over raw slices.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full-sort top-k: (candidate index, similarity), most similar first,
/// equal similarities by ascending index.
pub fn knn_oracle(sims: &[(usize, f64)], k: usize) -> Vec<(usize, f64)> {
    let mut all = sims.to_vec();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).collect()
}

/// Metric counts as exact fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fractions {
    pub pa: (usize, usize),
    pub pta: (usize, usize),
    pub rta: (usize, usize),
}

/// Direct transcription of the metric definitions.
pub fn metrics_oracle(rows: &[EvaluationRow]) -> Fractions {
    let n = rows.len();
    let pa_num = rows.iter().filter(|r| r.predicted.as_ref() == Some(&r.ground_truth)).count();

    let gts: BTreeSet<&str> = rows.iter().map(|r| r.ground_truth.as_str()).collect();
    let mut correct = 0;
    for g in &gts {
        let all_ok = rows
            .iter()
            .filter(|r| r.ground_truth.as_str() == *g)
            .all(|r| r.predicted.as_ref().map(Template::as_str) == Some(*g));
        if all_ok {
            correct += 1;
        }
    }
    let predicted: BTreeSet<&str> = rows.iter().filter_map(|r| r.predicted.as_ref().map(Template::as_str)).collect();
    Fractions {
        pa: (pa_num, n),
        pta: (correct, predicted.len()),
        rta: (correct, gts.len()),
    }
}

pub fn ratio((num, den): (usize, usize)) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub const SYNTHETIC_TEMPLATES: [&str; 20] = [
    "Receiving block <*> src: <*> dest: <*>",
    "PacketResponder <*> for block <*> terminating",
    "Verification succeeded for <*> on <*>",
    "Deleting block <*> file <*>",
    "session opened for user <*> by uid <*>",
    "Connection closed by <*> port <*> [preauth]",
    "Failed password for invalid user <*> from <*>",
    "kernel: cpu<*> throttled at <*>",
    "Starting container <*> with memory limit <*> MB",
    "GC pause <*> young generation took <*> ms",
    "HTTP GET <*> returned status <*>",
    "Scheduler assigned task <*> to executor <*>",
    "Checkpoint <*> written to disk in <*> seconds",
    "Mounting volume <*> at <*>",
    "DNS lookup timeout for host <*> via <*>",
    "Battery <*> level at <*> percent",
    "Interface <*> link state changed to <*>",
    "Job <*> completed successfully after <*> retries",
    "Unable to resolve dependency <*> version <*>",
    "Cache <*> eviction removed <*> entries",
];

fn variable(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!(
            "10.{}.{}.{}",
            rng.random_range(0..256u32),
            rng.random_range(0..256u32),
            rng.random_range(0..256u32)
        ),
        _ => {
            let len = rng.random_range(6..=10);
            (0..len).map(|_| rng.sample(Alphanumeric) as char).collect()
        }
    }
}

/// `rows` log lines drawn from [`SYNTHETIC_TEMPLATES`] with random variables.
pub fn synthetic_dataset(rows: usize, seed: u64) -> Vec<LogRecord> {
    let templates: Vec<Template> = SYNTHETIC_TEMPLATES.iter().map(|t| Template::normalize(t).unwrap()).collect();
    let mut rng = rng(seed);
    (0..rows)
        .map(|i| {
            let t = rng.random_range(0..templates.len());
            let template = &templates[t];
            let mut content = String::new();
            for (j, piece) in template.as_str().split("<*>").enumerate() {
                if j > 0 {
                    content.push_str(&variable(&mut rng));
                }
                content.push_str(piece);
            }
            LogRecord::new(i, content).with_ground_truth(template.clone(), Some(format!("E{t}")))
        })
        .collect()
}

/// Groups line ids by ground-truth template.
pub fn by_template(dataset: &[LogRecord]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for r in dataset {
        out.entry(r.ground_truth.as_ref().unwrap().to_string()).or_default().push(r.line_id);
    }
    out
}
