//! `fairtune`: train a tiny language model, fit debiasing adapters, and audit
//! counterfactual bias, one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 2 configuration or input errors, 3 missing upstream
//! artifact, 4 scoring backend failures, 1 anything else.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fairtune::error::{Error, Result};
use fairtune::metrics::RunMode;

use commands::AdapterKind;
use config::RunConfig;
use manifest::DirLock;

#[derive(Parser)]
#[command(name = "fairtune", version, about = "Measure and reduce identity-term bias in tiny language models")]
struct Cli {
    /// Config file (TOML). Defaults to ./fairtune.toml when present.
    #[arg(long, global = true, env = "FAIRTUNE_CONFIG")]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the neutrality tolerance on log-likelihood deltas.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> std::result::Result<RunMode, String> {
    RunMode::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Expand identity templates into the counterfactual pair benchmark.
    BuildBench,
    /// Generate a synthetic corpus with a planted stereotype rate.
    SynthCorpus,
    /// Clean raw text into one training sentence per line.
    CleanCorpus,
    /// Train the base model or an adapter on the configured corpus.
    Train {
        #[command(subcommand)]
        what: TrainWhat,
    },
    /// Score every benchmark pair with the configured backend.
    Score {
        /// Which weights to score: pretrained, lora, or soft-prompt.
        #[arg(long, default_value = "pretrained", value_parser = parse_mode)]
        mode: RunMode,
    },
    /// Aggregate scores into bias tables, optionally against a baseline run.
    Report {
        #[arg(long, default_value = "pretrained", value_parser = parse_mode)]
        mode: RunMode,
        /// Earlier run to diff against and test significance.
        #[arg(long, value_parser = parse_mode)]
        baseline: Option<RunMode>,
    },
    /// Paired significance tests between two scoring runs.
    Stats {
        #[arg(long, value_parser = parse_mode)]
        before: RunMode,
        #[arg(long, value_parser = parse_mode)]
        after: RunMode,
    },
    /// Check analytic gradients against finite differences.
    GradCheck {
        /// Coordinates sampled per parameter class.
        #[arg(long, default_value_t = 50)]
        per_class: usize,
    },
    /// Print the effective configuration after overrides.
    ShowConfig,
}

#[derive(Subcommand)]
enum TrainWhat {
    /// Full model from random initialization.
    Base,
    /// Low-rank adapter on a frozen base model.
    Lora,
    /// Soft prompt on a frozen base model.
    SoftPrompt,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let fallback = Path::new("fairtune.toml");
            if fallback.exists() {
                RunConfig::load(fallback)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = cli.epsilon {
        cfg.epsilon = eps;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String> {
    let cfg = load_config(&cli)?;
    if let Command::ShowConfig = cli.command {
        return Ok(cfg.canonical_toml());
    }
    // One writer at a time per output directory; released when the command
    // finishes either way.
    let _lock = DirLock::acquire(&cfg.out_dir)?;
    match cli.command {
        Command::BuildBench => commands::build_bench(&cfg),
        Command::SynthCorpus => commands::synth_corpus(&cfg),
        Command::CleanCorpus => commands::clean_corpus_cmd(&cfg),
        Command::Train { what } => match what {
            TrainWhat::Base => commands::train_base(&cfg),
            TrainWhat::Lora => commands::train_adapter(&cfg, AdapterKind::Lora),
            TrainWhat::SoftPrompt => commands::train_adapter(&cfg, AdapterKind::SoftPrompt),
        },
        Command::Score { mode } => commands::score(&cfg, mode),
        Command::Report { mode, baseline } => commands::report(&cfg, mode, baseline),
        Command::Stats { before, after } => commands::stats_cmd(&cfg, before, after),
        Command::GradCheck { per_class } => commands::grad_check_cmd(&cfg, per_class),
        Command::ShowConfig => unreachable!("handled above"),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Lexicon(_)
        | Error::Template(_)
        | Error::Parse { .. } => 2,
        Error::MissingArtifact(_) => 3,
        Error::Backend { .. }
        | Error::Timeout { .. }
        | Error::IdMismatch { .. }
        | Error::MalformedResponse { .. } => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
