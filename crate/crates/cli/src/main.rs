use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracdetect::experiment::{load_config, run, Pipeline};

/// Enclosure-method experiments for order-jump detection.
#[derive(Debug, Parser)]
#[command(name = "fracdetect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `[output] dir`.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (0 = all cores, 1 = serial).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate the indicator over the τ schedule.
    Sweep,
    /// Sweep and fit the distance and jump sign.
    Reconstruct,
    /// Sweep, fit and classify the limit for every configured T.
    Threshold,
    /// Compare the closed-form background against independent references.
    VerifyOracles,
    /// Simulate a time-domain measurement and reconcile both indicator paths.
    Roundtrip,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();

    let Some(path) = cli.config.as_ref() else {
        eprintln!("error: --config <FILE> is required");
        return ExitCode::from(EXIT_CONFIG);
    };
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let pipeline = match cli.command {
        Command::Sweep => Pipeline::Sweep,
        Command::Reconstruct => Pipeline::Reconstruct,
        Command::Threshold => Pipeline::Threshold,
        Command::VerifyOracles => Pipeline::VerifyOracles,
        Command::Roundtrip => Pipeline::Roundtrip,
    };
    log::info!("config {} (sha256 {})", path.display(), cfg.fingerprint);
    match run(&cfg, pipeline, &out, cli.workers != 1) {
        Ok(art) => {
            print!("{}", art.summary);
            println!("artifacts written to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            }
        }
    }
}
