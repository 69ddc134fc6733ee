use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dmmimo_harness::config::{parse_snr_list, Experiment, ExperimentConfig, Overrides};
use dmmimo_harness::error::HarnessError;

#[derive(Parser)]
#[command(name = "dmmimo", version, about = "DM-MIMO link-level simulator")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Monte Carlo trials (held-out samples for e2e-eval and train --stage 2).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// SNR list in dB, e.g. `0,10,inf` or `0:20:2`.
    #[arg(long, global = true, value_parser = parse_snr_list)]
    // Full path so clap parses one value into a list instead of many.
    snr: Option<std::vec::Vec<f64>>,
    /// `oracle` or a predictor checkpoint path.
    #[arg(long, global = true)]
    predictor: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Singular-value statistics of the Rayleigh channel.
    SvdStats,
    /// Per-sub-channel MSE with and without the denoiser.
    MseSweep {
        /// Dump the sampler trace of the first trial at every SNR.
        #[arg(long)]
        trace: bool,
    },
    /// Source reconstruction MSE of the trained codecs.
    E2eEval,
    /// One stage of the training pipeline.
    Train {
        #[arg(long)]
        stage: u8,
    },
    /// Backpropagation against finite differences.
    GradientCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let exp = match cli.command {
        Command::SvdStats => Experiment::SvdStats,
        Command::MseSweep { trace } => {
            cfg.mse_sweep.trace |= trace;
            Experiment::MseSweep
        }
        Command::E2eEval => Experiment::E2eEval,
        Command::Train { stage } => Experiment::Train(stage),
        Command::GradientCheck => Experiment::GradientCheck,
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        trials: cli.trials,
        snr: cli.snr,
        predictor: cli.predictor,
    };
    cfg.apply(exp, &overrides)?;
    let summary = dmmimo_harness::run(&cfg, exp)?;
    // A closed stdout (e.g. piped into `head`) is not an error.
    let mut out = std::io::stdout().lock();
    for line in &summary.lines {
        let _ = writeln!(out, "{line}");
    }
    for f in &summary.files {
        let _ = writeln!(out, "wrote {}", f.display());
    }
    Ok(())
}
