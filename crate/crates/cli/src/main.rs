use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pruneprobe::config::ExperimentConfig;
use pruneprobe::pipeline::{self, parse_stages, RunOptions, Stage};
use pruneprobe::Error;

/// Prune, probe and compare small encoder-decoder transformers.
#[derive(Parser)]
#[command(name = "pruneprobe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic parallel corpus.
    Generate(Common),
    /// Train the dense model and save the rewind point.
    Train(Common),
    /// Run iterative magnitude pruning (and the random baseline).
    Imp(Common),
    /// Dump activations and attention maps for every pruned model.
    Dump(Common),
    /// Train probing classifiers on the dumps.
    Probe(Common),
    /// Cross-model similarity analyses.
    Similarity(Common),
    /// Assemble the report bundle.
    Report(Common),
    /// Run the pipeline, skipping stages that are up to date.
    Run(RunArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rerun even if the stage is up to date.
    #[arg(long)]
    force: bool,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated subset of stages, e.g. `probe,report`.
    #[arg(long)]
    stages: Option<String>,
}

fn load_config(c: &Common) -> pruneprobe::Result<ExperimentConfig> {
    let mut config = match &c.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(out) = &c.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn execute(cli: Cli) -> pruneprobe::Result<()> {
    let (common, stages) = match cli.command {
        Command::Generate(c) => (c, Some(vec![Stage::Generate])),
        Command::Train(c) => (c, Some(vec![Stage::Train])),
        Command::Imp(c) => (c, Some(vec![Stage::Imp])),
        Command::Dump(c) => (c, Some(vec![Stage::Dump])),
        Command::Probe(c) => (c, Some(vec![Stage::Probe])),
        Command::Similarity(c) => (c, Some(vec![Stage::Similarity])),
        Command::Report(c) => (c, Some(vec![Stage::Report])),
        Command::Run(r) => {
            let stages = r.stages.as_deref().map(parse_stages).transpose()?;
            (r.common, stages)
        }
    };
    let config = load_config(&common)?;
    let options = RunOptions {
        stages,
        force: common.force,
    };
    let summary = pipeline::run(&config, &options)?;
    for s in &summary.executed {
        println!("{:<11} ran", s);
    }
    for s in &summary.skipped {
        println!("{:<11} up to date", s);
    }
    println!("outputs in {}", config.out.display());
    Ok(())
}

/// 1 for anything rejected before a stage starts, 2 once a stage has failed.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::MissingPrerequisites(_) | Error::DigestMismatch { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
