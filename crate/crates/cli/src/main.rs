use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fiber_ae::pipeline::ChannelTag;

mod artifacts;
mod commands;
mod config;

use config::{ExperimentConfig, Overrides};

/// End-to-end learning of constellation shaping and nonlinear pre-emphasis
/// for long-haul dual-polarization fiber links.
#[derive(Parser, Debug)]
#[command(name = "fiber-ae", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; the per-stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (pins the pool size for reproducibility).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Launch power override in dBm (total over both polarizations).
    #[arg(long = "power-dbm", global = true, allow_negative_numbers = true)]
    power_dbm: Option<f64>,
    /// Evaluation channel.
    #[arg(long, global = true, value_enum)]
    channel: Option<ChannelArg>,
    /// Disable the pre-emphasis everywhere.
    #[arg(long = "no-preemph", global = true)]
    no_preemph: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ChannelArg {
    Ssfm,
    Rp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare the RP model with the SSFM reference over a power sweep.
    ValidateRp,
    /// Train on the RP model end to end.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the decoder on SSFM data.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate MI over fresh sequences.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full recipe at every power of the sweep.
    Sweep,
}

/// Process exit code of a failure: 2 for numeric failures inside the
/// models, 1 for everything else (configuration, input, IO).
fn exit_code(err: &anyhow::Error) -> u8 {
    use fiber_ae::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numeric(_) | Error::Divergence { .. } | Error::TrainingDiverged { .. } | Error::Autograd { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        power_dbm: cli.power_dbm,
        channel: cli.channel.map(|c| match c {
            ChannelArg::Ssfm => ChannelTag::Ssfm,
            ChannelArg::Rp => ChannelTag::Rp,
        }),
        no_preemph: cli.no_preemph,
    };
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let out = artifacts::ensure_dir(&cfg.out_dir)?;
    artifacts::write_text(&out.join("resolved_config.toml"), &cfg.to_toml()?)?;
    match cli.command {
        Command::ValidateRp => commands::validate_rp(&cfg, &out),
        Command::Train { resume } => commands::train(&cfg, &out, resume.as_deref()),
        Command::Finetune { checkpoint } => commands::finetune(&cfg, &out, checkpoint.as_deref()),
        Command::Evaluate { checkpoint } => commands::evaluate(&cfg, &out, checkpoint.as_deref()),
        Command::Sweep => commands::sweep(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
