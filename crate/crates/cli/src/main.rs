//! `svbackend` - speaker-verification back-end CLI.
//!
//! Subcommands cover the full pipeline: `synth` (generate benchmark data),
//! `fit-chain` (preprocessing), `train` (PLDA / mixture), `score`,
//! `normalize` (s-norm, channel norm), `eval` (EER / min cost), and
//! `diagnose` (covariance spectra).
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure. Errors additionally print one machine-readable JSON line on
//! stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svbackend::error::Error;
use svbackend::io::EmbeddingFormat;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "svbackend", version, about = "Speaker-verification back-end")]
struct Cli {
    /// Pipeline configuration file (JSON; defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Bound the worker pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Embedding file format; inferred from the extension when omitted.
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<EmbeddingFormat>,

    #[command(subcommand)]
    command: Command,
}

fn parse_format(s: &str) -> Result<EmbeddingFormat, String> {
    EmbeddingFormat::parse(s).ok_or_else(|| format!("unknown format '{s}' (expected tsv or raw)"))
}

#[derive(Subcommand)]
enum Command {
    /// Fit a preprocessing chain on training embeddings.
    FitChain {
        /// Training embeddings.
        #[arg(long)]
        train: PathBuf,
        /// Metadata TSV (overrides the <stem>.meta.tsv sidecar).
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Recipe override, e.g. "nap:gender:1,center,lda:100,ln".
        #[arg(long)]
        recipe: Option<String>,
        /// Compact factor whose projection (plus length norm) is applied
        /// before the recipe steps.
        #[arg(long)]
        pre_factor: Option<PathBuf>,
        /// Output chain file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured back-end model (plda or mixture).
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Preprocessing chain applied before training.
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list.
    Score {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        chain: Option<PathBuf>,
        /// PLDA or mixture model file (backends plda / mixture).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Compact factor file (backend cosine-cl).
        #[arg(long)]
        factor: Option<PathBuf>,
        /// Classifier-head file; its compact factor is computed on the fly
        /// (backend cosine-cl, alternative to --factor).
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply score normalization (s-norm and/or channel norm per config).
    Normalize {
        #[arg(long)]
        scores: PathBuf,
        /// Trial embeddings (required for s-norm).
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Models file defining the enrollment sets behind the scores.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        factor: Option<PathBuf>,
        /// Classifier-head file (backend cosine-cl, alternative to --factor).
        #[arg(long)]
        head: Option<PathBuf>,
        /// Cohort embeddings (required for s-norm).
        #[arg(long)]
        cohort_emb: Option<PathBuf>,
        #[arg(long)]
        cohort_meta: Option<PathBuf>,
        /// Labeled development scores to fit channel statistics from.
        #[arg(long)]
        dev_scores: Option<PathBuf>,
        /// Precomputed channel statistics (JSON).
        #[arg(long)]
        channel_stats: Option<PathBuf>,
        /// Write fitted channel statistics here.
        #[arg(long)]
        save_channel_stats: Option<PathBuf>,
        /// Dump the post-s-norm, pre-channel-norm scores.
        #[arg(long)]
        dump_intermediate: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute EER and minimum detection cost from labeled scores.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Write DET staircase points (TSV) here.
        #[arg(long)]
        det: Option<PathBuf>,
    },
    /// Emit covariance spectra (total eigenvalues, within/across diagonals).
    Diagnose {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic embedding set (and optional trial list).
    Synth {
        /// Generator spec (JSON), optionally with a "trials" block.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report(&Error::config(e.to_string()));
            return ExitCode::from(1);
        }
    };

    if let Some(n) = cli.threads {
        if let Err(e) = svbackend::par::set_threads(n) {
            report(&e);
            return ExitCode::from(1);
        }
    }

    let cfg = match &cli.config {
        Some(path) => match PipelineConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                report(&e);
                return ExitCode::from(1);
            }
        },
        None => PipelineConfig::defaults(),
    };

    let ctx = commands::Context {
        cfg,
        seed: cli.seed,
        format: cli.format,
    };
    match commands::run(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            let code = match e.kind() {
                "config" => 1,
                "numeric" => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

/// One machine-readable error line on stderr.
fn report(e: &Error) {
    let line = serde_json::json!({
        "error": { "kind": e.kind(), "message": e.to_string() }
    });
    eprintln!("{line}");
}
