use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{Config, Layout};

/// Self-training with confidence-filtered pseudo-labels on a synthetic
/// speech recognition task.
#[derive(Debug, Parser)]
#[command(name = "selflabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for training and decoding (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Overrides the config's run seed.
    #[arg(long, global = true, value_name = "K")]
    seed: Option<u64>,

    /// Output directory (default: `out` next to the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the labeled, unlabeled and dev corpora plus LM text.
    Synth,
    /// Train the character n-gram LM and export it as ARPA.
    LmTrain,
    /// Train the seed acoustic model on the labeled corpus.
    Train,
    /// Decode a manifest to N-best JSON Lines.
    Decode,
    /// Generate and filter one round of pseudo-labels.
    Pl,
    /// Run the iterative self-training loop.
    Selftrain,
    /// Evaluate the seed, raw-PL and best-PL models.
    Eval,
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli.config.context("--config PATH is required")?;
    if let Some(n) = cli.jobs {
        anyhow::ensure!(n > 0, "--jobs must be positive");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let mut cfg = Config::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let layout = Layout::new(&config_path, &cfg.paths, cli.out.as_deref());
    let ctx = commands::Ctx { cfg, layout };
    match cli.command {
        Command::Synth => ctx.synth(),
        Command::LmTrain => ctx.lm_train(),
        Command::Train => ctx.train(),
        Command::Decode => ctx.decode(),
        Command::Pl => ctx.pl(),
        Command::Selftrain => ctx.selftrain(),
        Command::Eval => ctx.eval(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SELFLABEL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
