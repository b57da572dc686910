//! Run manifests: what went into a run and what came out.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use logprompt_core::PipelineConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        loop {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(hasher.finalize()),
        })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub config: PipelineConfig,
    pub encoder_backend: String,
    pub completion_backend: Option<String>,
    pub dataset: FileDigest,
    pub dataset_rows: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
}

pub struct ManifestBuilder {
    command: String,
    config: PipelineConfig,
    started: DateTime<Utc>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &PipelineConfig) -> Self {
        Self {
            command: command.into(),
            config: config.clone(),
            started: Utc::now(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn finish(
        self,
        encoder_backend: &str,
        completion_backend: Option<&str>,
        dataset: FileDigest,
        dataset_rows: usize,
        inputs: Vec<FileDigest>,
        outputs: Vec<PathBuf>,
        path: &Path,
    ) -> Result<()> {
        let manifest = RunManifest {
            tool: concat!("logprompt ", env!("CARGO_PKG_VERSION")).into(),
            command: self.command,
            config: self.config,
            encoder_backend: encoder_backend.into(),
            completion_backend: completion_backend.map(str::to_owned),
            dataset,
            dataset_rows,
            inputs,
            outputs,
            started_at: stamp(self.started),
            finished_at: stamp(Utc::now()),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        crate::commands::write_atomic(path, format!("{text}\n").as_bytes())
    }
}

/// `<output>.manifest.json` unless a path was given.
pub fn default_path(output: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    })
}
