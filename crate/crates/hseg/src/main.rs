//! Thin CLI over the four pipeline stages. All behaviour lives in the
//! library; this binary only parses arguments and forwards a config.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use hseg::config::RunConfig;
use hseg::run;

#[derive(Parser)]
#[command(
    name = "hseg",
    version,
    about = "Per-pixel lymphocyte classification from nuclear-channel images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines). Defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the training epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic slide dataset and extract labelled patches.
    Generate(Common),
    /// Train the network and write checkpoint, split and loss log.
    Train(Common),
    /// Score the checkpoint on one split and write the report table.
    Eval(Common),
    /// Optimise a quadrant input and render saliency maps.
    Explain(Common),
}

fn load(common: &Common) -> hseg::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.epochs = epochs;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => load(c).and_then(|cfg| run::run_generate(&cfg).map(drop)),
        Command::Train(c) => load(c).and_then(|cfg| run::run_train(&cfg).map(drop)),
        Command::Eval(c) => load(c).and_then(|cfg| run::run_eval(&cfg).map(drop)),
        Command::Explain(c) => load(c).and_then(|cfg| run::run_explain(&cfg).map(drop)),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
