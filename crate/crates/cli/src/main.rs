//! `eba`: clarity-gated underwater enhancement from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for configuration and input errors.
pub const EXIT_INPUT: u8 = 2;
/// Exit status when some images or results could not be processed.
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "eba", version, about = "Clarity-gated underwater image enhancement")]
pub struct Cli {
    /// Seed for every stochastic component.
    #[arg(long, global = true, default_value_t = 42, value_parser = clap::value_parser!(u64).range(1..))]
    pub seed: u64,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,

    /// key = value file with defaults for any flag; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed every manifest image plus the condition prompts into an EBAE file.
    Embed(EmbedArgs),
    /// Dataset bias audit: cluster entropy, weights, prompt table, t-SNE.
    Audit(AuditArgs),
    /// Gate, plan and enhance a dataset.
    Run(RunArgs),
    /// Score pre-computed results against ground truth.
    Eval(EvalArgs),
    /// Compare a gated run with a full run.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `test`, `remote` (uses EBAAI_PROVIDER_URL) or `remote:URL`.
    #[arg(long)]
    pub provider: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = eba_core::embed::DEFAULT_PROMPT_PREFIX)]
    pub prompt_prefix: String,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Used for prompt embeddings missing from the file.
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub clusters: u64,
    #[arg(long, overrides_with = "no_tsne")]
    pub tsne: bool,
    #[arg(long, overrides_with = "tsne")]
    pub no_tsne: bool,
    /// Defaults to min(30, largest valid value for the dataset size).
    #[arg(long)]
    pub perplexity: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value = eba_core::embed::DEFAULT_PROMPT_PREFIX)]
    pub prompt_prefix: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// EBAE file; `--provider` then only fills gaps.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// `test`, `remote` or `remote:URL`. Defaults to EBAAI_PROVIDER_URL when set.
    #[arg(long)]
    pub provider: Option<String>,
    /// Skip images whose clarity score exceeds this value.
    #[arg(long, conflicts_with = "target_skip")]
    pub threshold: Option<f64>,
    /// Calibrate the threshold to skip this fraction of the dataset.
    #[arg(long)]
    pub target_skip: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub dmax: Option<u32>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `baseline` or `external:DIR`.
    #[arg(long, default_value = "baseline")]
    pub enhancer: String,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub saturation_boost: Option<f64>,
    #[arg(long)]
    pub percentile_clip: Option<f64>,
    #[arg(long, overrides_with = "no_uncertainty")]
    pub uncertainty: bool,
    #[arg(long, overrides_with = "uncertainty")]
    pub no_uncertainty: bool,
    #[arg(long, default_value_t = 20)]
    pub passes: usize,
    #[arg(long, default_value_t = 0.02)]
    pub jitter_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = eba_core::uncertainty::DEFAULT_REVIEW_THRESHOLD)]
    pub review_threshold: f64,
    /// `abort` or `skip-gating`.
    #[arg(long, default_value = "abort")]
    pub on_provider_error: String,
    #[arg(long, default_value = eba_core::embed::DEFAULT_PROMPT_PREFIX)]
    pub prompt_prefix: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Manifest whose entries carry `gt` paths.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Result directory per model, `DIR` or `NAME=DIR`; repeatable.
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    pub results: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub gated: PathBuf,
    #[arg(long)]
    pub full: PathBuf,
    /// Markdown table path.
    #[arg(long)]
    pub out: PathBuf,
    /// Headline drop to print next to the recomputed one.
    #[arg(long)]
    pub reported_drop: Option<f64>,
}

fn main() -> ExitCode {
    let raw: Vec<_> = std::env::args_os().collect();
    let args = match config::load_and_merge(raw) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
