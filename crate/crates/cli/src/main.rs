use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use logprompt_core::config::{CompletionConfig, EncoderConfig, RemoteSettings, DEFAULT_API_KEY_ENV};
use logprompt_core::pipeline::PermutationMode;
use logprompt_core::PipelineConfig;

mod commands;
mod manifest;

/// Few-shot log parsing with a completion model.
///
/// Settings come from `--config` (TOML) and are overridden by flags. API keys
/// are read from the environment variable named in the config
/// (`OPENAI_API_KEY` by default) and never from flags or files.
#[derive(Parser)]
#[command(name = "logprompt", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a diverse candidate set for labeling.
    Sample {
        /// Candidate CSV to write (line_id,content,template).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fill candidate labels from the dataset's EventTemplate column.
    Autolabel {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse every dataset line using the labeled candidates.
    Parse {
        /// Labeled candidate CSV.
        #[arg(long)]
        labels: PathBuf,
        /// Parse-output CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-line prompts and raw completions (JSON lines).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a parse-output file against the dataset ground truth.
    Evaluate {
        #[arg(long)]
        parsed: PathBuf,
        /// Report JSON to write.
        #[arg(long)]
        report: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Evaluate a grid of candidate counts, example counts and orders.
    Ablate {
        #[arg(long)]
        labels: PathBuf,
        /// Sweep grid (TOML).
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Ascending,
    Descending,
    Random,
}

/// Flags mirroring the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// Structured log CSV.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Candidate-set size K.
    #[arg(long, global = true)]
    candidates: Option<usize>,
    /// Examples per prompt k.
    #[arg(long, global = true)]
    examples: Option<usize>,
    #[arg(long, global = true, value_enum)]
    permutation: Option<Order>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Allow examples whose content equals the query.
    #[arg(long, global = true)]
    allow_identical: bool,
    /// Ask once more with a larger budget when no template is found.
    #[arg(long, global = true)]
    retry_failed_extraction: bool,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    start_locator: Option<String>,
    #[arg(long, global = true)]
    end_locator: Option<String>,
    /// Embedding cache file.
    #[arg(long, global = true)]
    embedding_cache: Option<PathBuf>,
    /// Completion record/replay file.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Answer completions from the replay file only.
    #[arg(long, global = true)]
    offline: bool,
    /// Completion endpoint; selects the HTTP backend instead of the mock.
    #[arg(long, global = true)]
    completion_url: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Embedding endpoint; selects the HTTP encoder instead of n-grams.
    #[arg(long, global = true, requires_all = ["encoder_model", "encoder_dimension"])]
    encoder_url: Option<String>,
    #[arg(long, global = true)]
    encoder_model: Option<String>,
    #[arg(long, global = true)]
    encoder_dimension: Option<usize>,
}

impl Overrides {
    fn apply(self, cfg: &mut PipelineConfig) -> Result<()> {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v.into(); })*
            };
        }
        set!(
            candidates => cfg.candidates,
            examples => cfg.examples,
            parallelism => cfg.parallelism,
            start_locator => cfg.prompt.start_locator,
            end_locator => cfg.prompt.end_locator,
        );
        if let Some(d) = self.dataset {
            cfg.dataset = Some(d);
        }
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        if let Some(p) = self.permutation {
            cfg.permutation = match p {
                Order::Ascending => PermutationMode::Ascending,
                Order::Descending => PermutationMode::Descending,
                Order::Random => PermutationMode::Random,
            };
        }
        if self.allow_identical {
            cfg.exclude_identical = false;
        }
        if self.retry_failed_extraction {
            cfg.retry_failed_extraction = true;
        }
        if let Some(p) = self.embedding_cache {
            cfg.cache.embeddings = Some(p);
        }
        if let Some(p) = self.replay {
            cfg.cache.replay = Some(p);
        }
        if self.offline {
            cfg.cache.offline = true;
        }

        match (self.completion_url, &mut cfg.completion) {
            (Some(url), CompletionConfig::Http { url: u, .. }) => *u = url,
            (Some(url), c @ CompletionConfig::Mock) => {
                let Some(model) = self.model.clone() else {
                    bail!("--completion-url needs --model");
                };
                *c = CompletionConfig::Http {
                    url,
                    model,
                    api_key_env: DEFAULT_API_KEY_ENV.into(),
                    max_tokens: None,
                    stop_at_end_locator: true,
                    remote: RemoteSettings::default(),
                };
            }
            (None, _) => {}
        }
        if let (Some(m), CompletionConfig::Http { model, .. }) = (self.model, &mut cfg.completion) {
            *model = m;
        }

        if let Some(url) = self.encoder_url {
            cfg.encoder = EncoderConfig::Http {
                url,
                model: self.encoder_model.expect("required by clap"),
                dimension: self.encoder_dimension.expect("required by clap"),
                batch_size: 64,
                api_key_env: DEFAULT_API_KEY_ENV.into(),
                remote: RemoteSettings::default(),
            };
        }
        Ok(())
    }
}

/// Resolves relative paths in a config file against the file's directory.
fn rebase(cfg: &mut PipelineConfig, base: &Path) {
    let fix = |p: &mut Option<PathBuf>| {
        if let Some(path) = p {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    };
    fix(&mut cfg.dataset);
    fix(&mut cfg.cache.embeddings);
    fix(&mut cfg.cache.replay);
}

fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let mut cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            rebase(&mut cfg, p.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => PipelineConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.overrides)?;
    match cli.command {
        Command::Sample { out, manifest } => commands::sample(&cfg, &out, manifest),
        Command::Autolabel { labels, out } => commands::autolabel(&cfg, &labels, &out),
        Command::Parse {
            labels,
            out,
            trace,
            manifest,
        } => commands::parse(&cfg, &labels, &out, trace.as_deref(), manifest),
        Command::Evaluate { parsed, report, table } => commands::evaluate(&cfg, &parsed, &report, table.as_deref()),
        Command::Ablate {
            labels,
            sweep,
            report,
            manifest,
        } => commands::ablate(&cfg, &labels, &sweep, &report, manifest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
