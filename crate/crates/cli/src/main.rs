//! srt2: simulated super-resolution T2 mapping experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

mod config;
mod manifest;
mod sidecar;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_config, PipelineConfig};
use srt2_core::error::Error;

#[derive(Parser)]
#[command(
    name = "srt2",
    about = "Simulate multi-slice variable-TE acquisitions of a quantitative phantom, \
             reconstruct isotropic volumes by TV super-resolution, fit voxel-wise T2 maps, \
             and evaluate accuracy and repeatability.",
    version
)]
struct Cli {
    /// Configuration file (key = value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides run.output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed (overrides protocol.seed and derives per-repeat seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of noise repeats (overrides run.repeats).
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Worker threads; 0 uses all cores (overrides run.threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate LR series, reference scans, and ground truth volumes.
    Simulate,
    /// Super-resolve every TE of an existing simulation tree.
    Reconstruct {
        /// Simulation root (directory containing manifest.txt).
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit T2 maps for all arms of an existing tree.
    Fit {
        #[arg(long)]
        input: PathBuf,
    },
    /// ROI detection and report CSVs for a fitted tree.
    Analyze {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run simulate, reconstruct, fit, and analyze in sequence.
    Pipeline,
    /// Full pipeline per TE count, aggregated into one CSV.
    SweepTes {
        /// Comma-separated TE counts.
        #[arg(long, value_delimiter = ',', default_value = "4,5,6,8,10,18")]
        n_list: Vec<usize>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Numeric { .. } => EXIT_NUMERIC,
        Error::Format { .. } | Error::Io { .. } | Error::GridMismatch(_)
        | Error::DetectionFailure { .. } => EXIT_DATA,
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seeds.clear();
    }
    if let Some(repeats) = cli.repeats {
        cfg.repeats = repeats;
        if cfg.seeds.len() != repeats {
            cfg.seeds.clear();
        }
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &PipelineConfig) -> Result<(), Error> {
    match &cli.command {
        Command::Simulate => stages::run_simulate(cfg),
        Command::Reconstruct { input } => stages::run_reconstruct(cfg, input),
        Command::Fit { input } => stages::run_fit(cfg, input),
        Command::Analyze { input } => stages::run_analyze(cfg, input),
        Command::Pipeline => stages::run_pipeline(cfg),
        Command::SweepTes { n_list } => stages::run_sweep(cfg, n_list),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("srt2: configuration error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cfg.threads > 0 {
        // Ignore failure: the global pool may already exist (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("srt2: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
