use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairssl::harness::{
    emit_decomposition, emit_report, run_baseline, run_decomposition, run_sweep, ExperimentConfig, OutputFormat,
};
use fairssl::FairError;

#[derive(Parser)]
#[command(name = "fairssl", about = "Fairness-constrained semi-supervised classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output file; defaults to the config's `out` or stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv or jsonl; overrides the config.
    #[arg(long)]
    format: Option<String>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep c over seeds and unlabeled sizes.
    Sweep(Common),
    /// Bias/variance/noise decomposition per c.
    Decompose(Common),
    /// Uniform or preferential sampling baseline.
    Baseline(Common),
}

enum Failure {
    Config(FairError),
    Runtime(FairError),
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<PathBuf>), Failure> {
    let mut cfg = ExperimentConfig::from_file(&common.config).map_err(Failure::Config)?;
    if let Some(f) = &common.format {
        cfg.format = f.parse::<OutputFormat>().map_err(Failure::Config)?;
    }
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    let out = common.out.clone().or_else(|| cfg.out.clone());
    // Surface unreadable or malformed data before any run starts.
    cfg.load().map_err(Failure::Config)?;
    Ok((cfg, out))
}

fn write(text: String, out: Option<PathBuf>, emit: impl FnOnce(&std::path::Path) -> fairssl::Result<()>) -> Result<(), Failure> {
    match out {
        Some(p) => emit(&p).map_err(Failure::Runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sweep(common) => {
            let (cfg, out) = load(&common)?;
            let rows = run_sweep(&cfg).map_err(Failure::Runtime)?;
            let text = fairssl::harness::render(&rows, cfg.format);
            write(text, out, |p| emit_report(&rows, cfg.format, p))
        }
        Command::Baseline(common) => {
            let (cfg, out) = load(&common)?;
            let rows = run_baseline(&cfg).map_err(Failure::Runtime)?;
            let text = fairssl::harness::render(&rows, cfg.format);
            write(text, out, |p| emit_report(&rows, cfg.format, p))
        }
        Command::Decompose(common) => {
            let (cfg, out) = load(&common)?;
            let results = run_decomposition(&cfg).map_err(Failure::Runtime)?;
            let text = fairssl::harness::render_decomposition(&results, cfg.format);
            write(text, out, |p| emit_decomposition(&results, cfg.format, p))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("FAIRSSL_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: FAIRSSL_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
