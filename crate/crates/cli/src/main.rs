use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use curate::pipeline::{run_sweep, Pipeline, PipelineConfig, Stage, StageStatus, MANIFEST};
use curate::store::Format;
use curate::Error;

#[derive(Parser, Debug)]
#[command(
    name = "curate",
    version,
    about = "Open-set semi-supervised data curation pipeline"
)]
struct Cli {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Store format for data and embeddings.
    #[arg(long, global = true, value_parser = ["jsonl", "csv"])]
    format: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic open-set store (or ingest `input`).
    GenSynth,
    /// Train the contrastive encoder and embed every record.
    TrainSsl,
    /// Fit the Gaussian mixture to the labeled and unlabeled embeddings.
    FitGmm,
    /// Compute cluster impurities and OOD scores.
    Score,
    /// Build the two-stage sampling plan.
    Plan,
    /// Train MixMatch classifiers for each sampler mode.
    TrainSemisl,
    /// Evaluate classifiers and OOD scores.
    Eval,
    /// Run every stage in order.
    RunAll,
    /// Run the configured grid and write summary tables.
    Sweep,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenSynth => Stage::GenSynth,
            Command::TrainSsl => Stage::TrainSsl,
            Command::FitGmm => Stage::FitGmm,
            Command::Score => Stage::Score,
            Command::Plan => Stage::Plan,
            Command::TrainSemisl => Stage::TrainSemisl,
            Command::Eval => Stage::Eval,
            _ => return None,
        })
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(f) = &cli.format {
        config.format = f.parse::<Format>()?;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    match cli.command {
        Command::ShowConfig => print!("{}", config.to_toml()),
        Command::Sweep => {
            let outcomes = run_sweep(&config, &cli.out)?;
            let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
            println!(
                "sweep: {} cells, {} failed; summary in {}",
                outcomes.len(),
                failed,
                cli.out.join("sweep_summary.csv").display()
            );
        }
        Command::RunAll => {
            let pipeline = Pipeline::new(config, &cli.out)?;
            for stage in Stage::ALL {
                report(stage, pipeline.run_stage(stage)?);
            }
            println!("manifest: {}", pipeline.path(MANIFEST).display());
        }
        cmd => {
            let stage = cmd.stage().expect("stage command");
            let pipeline = Pipeline::new(config, &cli.out)?;
            report(stage, pipeline.run_stage(stage)?);
        }
    }
    Ok(())
}

fn report(stage: Stage, status: StageStatus) {
    match status {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::Skipped => println!("{stage}: up to date, skipped"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
