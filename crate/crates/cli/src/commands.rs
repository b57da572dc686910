use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use logprompt_core::formats::{
    load_candidates, load_dataset, load_parse_output, write_candidates, write_parse_output, ParseRow, ParseStatus,
};
use logprompt_core::pipeline::{
    ablate as run_sweep, build_candidates, evaluate_parse, label_from_ground_truth, sample_for_labeling, AblationCell,
    ParseOutcome, SweepSpec,
};
use logprompt_core::{LogParser, LogRecord, PipelineConfig};
use serde::Serialize;

use crate::manifest::{default_path, FileDigest, ManifestBuilder};

/// Writes through a sibling temp file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

fn dataset(cfg: &PipelineConfig) -> Result<(PathBuf, Vec<LogRecord>)> {
    let path = cfg
        .dataset
        .clone()
        .context("no dataset configured (use --dataset or `dataset` in the config file)")?;
    let rows = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((path, rows))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

pub fn sample(cfg: &PipelineConfig, out: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let run = ManifestBuilder::start("sample", cfg);
    let (path, logs) = dataset(cfg)?;
    let embeddings = cfg.build_embeddings()?;
    let (rows, picked) = sample_for_labeling(&logs, &embeddings, cfg.candidates)?;

    let mut buf = Vec::new();
    write_candidates(&mut buf, &rows)?;
    write_atomic(out, &buf)?;

    println!(
        "selected {} of {} requested candidates from {} distinct contents ({} lines)",
        rows.len(),
        cfg.candidates,
        picked.distinct,
        logs.len()
    );
    if rows.len() < cfg.candidates {
        eprintln!("warning: fewer distinct contents than requested candidates");
    }
    let all: BTreeSet<&str> = logs.iter().filter_map(|r| r.ground_truth.as_ref().map(|t| t.as_str())).collect();
    if !all.is_empty() {
        let covered: BTreeSet<&str> = picked
            .indices
            .iter()
            .filter_map(|&i| logs[i].ground_truth.as_ref().map(|t| t.as_str()))
            .collect();
        println!("candidates cover {} of {} ground-truth templates", covered.len(), all.len());
    }

    run.finish(
        embeddings.backend_id(),
        None,
        FileDigest::of(&path)?,
        logs.len(),
        Vec::new(),
        vec![out.to_path_buf()],
        &default_path(out, manifest),
    )
}

pub fn autolabel(cfg: &PipelineConfig, labels: &Path, out: &Path) -> Result<()> {
    let (_, logs) = dataset(cfg)?;
    let mut rows = load_candidates(labels)?;
    label_from_ground_truth(&mut rows, &logs)?;
    let mut buf = Vec::new();
    write_candidates(&mut buf, &rows)?;
    write_atomic(out, &buf)?;
    println!("labeled {} candidates from ground truth", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    line_id: usize,
    status: ParseStatus,
    example_ids: &'a [usize],
    prompt: &'a str,
    raw_completion: &'a str,
    error: Option<&'a str>,
}

pub fn parse(
    cfg: &PipelineConfig,
    labels: &Path,
    out: &Path,
    trace: Option<&Path>,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let run = ManifestBuilder::start("parse", cfg);
    let (path, logs) = dataset(cfg)?;
    let embeddings = cfg.build_embeddings()?;
    let rows = load_candidates(labels).with_context(|| format!("loading {}", labels.display()))?;
    let candidates = build_candidates(&rows, &embeddings)?;
    let backend = cfg.build_backend()?;
    let parser = LogParser::new(&embeddings, backend.as_ref(), cfg.parse_settings())?;
    let outcomes = parser.parse(&logs, &candidates)?;

    let parsed: Vec<ParseRow> = outcomes.iter().map(ParseOutcome::to_row).collect();
    let mut buf = Vec::new();
    write_parse_output(&mut buf, &parsed)?;
    write_atomic(out, &buf)?;

    let mut outputs = vec![out.to_path_buf()];
    if let Some(trace) = trace {
        let mut text = String::new();
        for o in &outcomes {
            let record = TraceRecord {
                line_id: o.line_id,
                status: o.status,
                example_ids: &o.example_ids,
                prompt: &o.prompt,
                raw_completion: &o.raw_completion,
                error: o.error.as_deref(),
            };
            text.push_str(&serde_json::to_string(&record)?);
            text.push('\n');
        }
        write_atomic(trace, text.as_bytes())?;
        outputs.push(trace.to_path_buf());
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in &outcomes {
        *counts.entry(o.status.as_str()).or_default() += 1;
    }
    let summary: Vec<String> = counts.iter().map(|(s, n)| format!("{s}={n}")).collect();
    println!("parsed {} lines: {}", outcomes.len(), summary.join(" "));

    run.finish(
        embeddings.backend_id(),
        Some(backend.backend_id()),
        FileDigest::of(&path)?,
        logs.len(),
        vec![FileDigest::of(labels)?],
        outputs,
        &default_path(out, manifest),
    )
}

pub fn evaluate(cfg: &PipelineConfig, parsed: &Path, report: &Path, table: Option<&Path>) -> Result<()> {
    let (_, logs) = dataset(cfg)?;
    let rows = load_parse_output(parsed).with_context(|| format!("loading {}", parsed.display()))?;
    let result = evaluate_parse(&rows, &logs)?;
    write_json(report, &result)?;
    let text = result.to_string();
    print!("{text}");
    if let Some(t) = table {
        write_atomic(t, text.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationReport<'a> {
    sweep: &'a SweepSpec,
    cells: &'a [AblationCell],
}

fn ablation_table(cells: &[AblationCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>4} {:<11} {:>5} {:>8} {:>8} {:>8}",
        "K", "k", "order", "runs", "PA", "PTA", "RTA"
    );
    for c in cells {
        let order = serde_json::to_value(c.permutation).ok();
        let order = order.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        let _ = writeln!(
            out,
            "{:>6} {:>4} {:<11} {:>5} {:>8.4} {:>8.4} {:>8.4}",
            c.candidates,
            c.examples,
            order,
            c.runs.len(),
            c.mean.pa,
            c.mean.pta,
            c.mean.rta
        );
    }
    out
}

pub fn ablate(
    cfg: &PipelineConfig,
    labels: &Path,
    sweep: &Path,
    report: &Path,
    manifest: Option<PathBuf>,
) -> Result<()> {
    let run = ManifestBuilder::start("ablate", cfg);
    let spec: SweepSpec = toml::from_str(
        &std::fs::read_to_string(sweep).with_context(|| format!("reading {}", sweep.display()))?,
    )
    .with_context(|| format!("parsing {}", sweep.display()))?;
    let (path, logs) = dataset(cfg)?;
    let embeddings = cfg.build_embeddings()?;
    let rows = load_candidates(labels)?;
    let backend = cfg.build_backend()?;
    let cells = run_sweep(&logs, &rows, &embeddings, backend.as_ref(), &cfg.parse_settings(), &spec)?;

    write_json(report, &AblationReport { sweep: &spec, cells: &cells })?;
    print!("{}", ablation_table(&cells));

    run.finish(
        embeddings.backend_id(),
        Some(backend.backend_id()),
        FileDigest::of(&path)?,
        logs.len(),
        vec![FileDigest::of(labels)?, FileDigest::of(sweep)?],
        vec![report.to_path_buf()],
        &default_path(report, manifest),
    )
}
