//! `urepa`: training, sampling, depth probing, gradient verification, and
//! teacher feature export for the hierarchical alignment models.
//!
//! Exit codes: 0 success, 1 user/config error, 2 internal verification
//! failure.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;
use std::process::ExitCode;
use urepa_core::error::{Error, Result};
use urepa_core::numerics::DType;
use urepa_core::trainer::checkpoint_dtype;

#[derive(Parser)]
#[command(
    name = "urepa",
    version,
    about = "Hierarchical diffusion transformer with representation alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint to load. Its embedded config is used unless --config is
    /// given.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, writing metrics, timings, and a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Integrate the probability flow from a checkpoint's EMA weights.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Guidance strength; 1 disables guidance.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Guidance interval as LO,HI over the time axis.
        #[arg(long)]
        interval: Option<String>,
        /// ODE integration steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fit a fresh projector per depth on a frozen checkpoint and report
    /// mean tokenwise similarity and feature dims.
    ProbeDepth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Comma-separated depths; all depths when omitted.
        #[arg(long)]
        depths: Option<String>,
    },
    /// Run the finite-difference gradient suite over every differentiable
    /// operation and loss composite.
    Gradcheck {
        /// Also write the report into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode the toy dataset with the stub teacher and write a URFT file.
    ExportFeatures {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_common(&mut config, common);
    config.validate()?;
    Ok(config)
}

fn apply_common(config: &mut RunConfig, common: &CommonArgs) {
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { common } => {
            let config = load_config(&common)?;
            match config.dtype {
                config::DTypeChoice::F32 => commands::train::<f32>(&config),
                config::DTypeChoice::F64 => commands::train::<f64>(&config),
            }
        }
        Command::Sample { common, ckpt, cfg_scale, interval, steps } => {
            match checkpoint_dtype(&ckpt.checkpoint)? {
                DType::F32 => sample_run::<f32>(&common, &ckpt, cfg_scale, interval, steps),
                DType::F64 => sample_run::<f64>(&common, &ckpt, cfg_scale, interval, steps),
            }
        }
        Command::ProbeDepth { common, ckpt, depths } => {
            match checkpoint_dtype(&ckpt.checkpoint)? {
                DType::F32 => probe_run::<f32>(&common, &ckpt, depths.as_deref()),
                DType::F64 => probe_run::<f64>(&common, &ckpt, depths.as_deref()),
            }
        }
        Command::Gradcheck { out } => commands::gradcheck(out.as_deref()),
        Command::ExportFeatures { common } => {
            let config = load_config(&common)?;
            commands::export_features(&config)
        }
    }
}

fn sample_run<T: urepa_core::numerics::Scalar>(
    common: &CommonArgs,
    ckpt: &CheckpointArgs,
    cfg_scale: Option<f64>,
    interval: Option<String>,
    steps: Option<usize>,
) -> Result<()> {
    let mut config = checkpoint_config(common, ckpt)?;
    if let Some(s) = cfg_scale {
        config.guidance.cfg_scale = s;
    }
    if let Some(text) = &interval {
        config.guidance.interval = commands::parse_interval(text)?;
    }
    if let Some(n) = steps {
        config.guidance.steps = n;
    }
    config.validate()?;
    commands::sample::<T>(&config, &ckpt.checkpoint)
}

fn probe_run<T: urepa_core::numerics::Scalar>(
    common: &CommonArgs,
    ckpt: &CheckpointArgs,
    depths: Option<&str>,
) -> Result<()> {
    let config = checkpoint_config(common, ckpt)?;
    let depths = commands::parse_depths(depths, config.model.total_blocks())?;
    commands::probe::<T>(&config, &ckpt.checkpoint, &depths)
}

/// Resolve config for checkpoint-consuming commands: --config wins,
/// otherwise the echo embedded in the checkpoint header.
fn checkpoint_config(common: &CommonArgs, ckpt: &CheckpointArgs) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let echo = urepa_core::trainer::checkpoint_echo(&ckpt.checkpoint)?;
            RunConfig::parse(&echo)?
        }
    };
    apply_common(&mut config, common);
    config.validate()?;
    Ok(config)
}

/// UREPA_THREADS caps internal parallelism; unset leaves the default pool.
fn init_threads() -> Result<()> {
    match std::env::var("UREPA_THREADS") {
        Err(_) => Ok(()),
        Ok(text) => {
            let n: usize = text
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    Error::Config(format!("UREPA_THREADS must be a positive integer, got {text:?}"))
                })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool init failed: {e}")))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; anything else is user error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
