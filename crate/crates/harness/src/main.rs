use std::path::PathBuf;
use std::process::ExitCode;

use bitlock_harness::config::ExperimentConfig;
use bitlock_harness::experiment::{Experiment, Stage};
use bitlock_harness::Result;
use clap::Parser;

/// Bit-flip attack and defense experiments on quantized networks.
#[derive(Debug, Parser)]
#[command(name = "bitlock", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, env = "BITLOCK_CONFIG")]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Stage to run.
    #[arg(long, value_enum, default_value = "all", env = "BITLOCK_STAGE")]
    stage: Stage,
    /// Worker threads (default: all cores).
    #[arg(long, env = "BITLOCK_JOBS")]
    jobs: Option<usize>,
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = ExperimentConfig::load(&cli.config)?;
    config.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        config.output_dir = dir.clone();
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| bitlock_harness::HarnessError::Config(e.to_string()))?;
    }
    let experiment = Experiment::new(config)?;
    let outcome = experiment.run(cli.stage);
    for w in experiment.warnings() {
        eprintln!("warning: {w}");
    }
    outcome?;
    println!("{} {} -> {}", cli.stage.name(), experiment.hash, experiment.out_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
