//! The `gsc` command-line driver.
//!
//! One subcommand per pipeline stage plus `run-all`, `transmit-demo`, and
//! `plot`.  Global flags pick the config file, output directory, and root
//! seed.  Exit codes: 0 success, 1 stage failure, 2 usage error (clap's
//! convention, which matches ours).

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::pipeline::{run_all, Pipeline};
use clap::{Parser, Subcommand, ValueEnum};
use gsc_core::deka::{GkaMode, RateStageMode};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "gsc",
    about = "Generative semantic communication experiment driver",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed; overrides the config's `[run] root_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for checkpoints, CSV, and charts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GkaModeArg {
    Makd,
    Ti,
    Db,
}

impl From<GkaModeArg> for GkaMode {
    fn from(m: GkaModeArg) -> GkaMode {
        match m {
            GkaModeArg::Makd => GkaMode::Makd,
            GkaModeArg::Ti => GkaMode::TiOnly,
            GkaModeArg::Db => GkaMode::DbOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RateModeArg {
    VrAlter,
    VrJoint,
    MiAlter,
    MiJoint,
}

impl From<RateModeArg> for RateStageMode {
    fn from(m: RateModeArg) -> RateStageMode {
        match m {
            RateModeArg::VrAlter => RateStageMode::VrAlter,
            RateModeArg::VrJoint => RateStageMode::VrJoint,
            RateModeArg::MiAlter => RateStageMode::MiAlter,
            RateModeArg::MiJoint => RateStageMode::MiJoint,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Render the cloud-style and edge-style datasets.
    SynthData,
    /// Train the shared latent codec.
    PretrainLatentCodec,
    /// Train the cloud noise predictor.
    TrainCloud,
    /// Train the edge noise predictor.
    TrainEdge,
    /// Train the base transmission codec at the reference condition.
    PretrainJscc,
    /// Generation-knowledge alignment (metaword + adapters).
    Gka {
        /// Alignment variant.
        #[arg(long, value_enum)]
        mode: Option<GkaModeArg>,
    },
    /// Transmission alignment, rate stage.
    TkaRate {
        /// Adapter sharing/alternation variant.
        #[arg(long, value_enum)]
        mode: Option<RateModeArg>,
    },
    /// Transmission alignment, per-SNR-group stage.
    TkaSnr,
    /// Monte-Carlo quality grid + alignment scores; writes eval.csv.
    Eval {
        /// Sweep the full (SNR × delay-spread) grid instead of the SNR
        /// sweep at the reference delay spread.
        #[arg(long)]
        grid: bool,
    },
    /// One generate→transmit→reconstruct round, printed to stdout.
    TransmitDemo,
    /// Re-render charts from eval.csv.
    Plot,
    /// Every stage in order.
    RunAll,
}

fn build_pipeline(cli: &Cli) -> Result<Pipeline> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.root_seed = seed;
    }
    cfg.validate()?;
    Ok(Pipeline::new(cfg, cli.out.clone()))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut pipeline = build_pipeline(cli)?;
    match &cli.command {
        Command::SynthData => pipeline.synth_data(),
        Command::PretrainLatentCodec => pipeline.pretrain_latent_codec(),
        Command::TrainCloud => pipeline.train_cloud(),
        Command::TrainEdge => pipeline.train_edge(),
        Command::PretrainJscc => pipeline.pretrain_jscc(),
        Command::Gka { mode } => {
            if let Some(m) = mode {
                pipeline.cfg.gka_mode = (*m).into();
            }
            pipeline.gka()
        }
        Command::TkaRate { mode } => {
            if let Some(m) = mode {
                pipeline.cfg.rate_mode = (*m).into();
            }
            pipeline.tka_rate()
        }
        Command::TkaSnr => pipeline.tka_snr(),
        Command::Eval { grid } => pipeline.eval(*grid),
        Command::TransmitDemo => {
            let summary = pipeline.transmit_demo()?;
            println!("{summary}");
            Ok(())
        }
        Command::Plot => pipeline.plot(),
        Command::RunAll => run_all(&pipeline),
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/usage and picks exit 0 for --help, 2 for
            // usage errors.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gsc: {e}");
            1
        }
    }
}
