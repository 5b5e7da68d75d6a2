use clap::{Parser, Subcommand};
use ilo_asr::cli::{cmd_compare, cmd_decode, cmd_gen, cmd_sweep_layer, cmd_train};
use ilo_asr::config::{RawConfig, RunSettings};
use std::path::PathBuf;
use std::process::ExitCode;

/// Sequence transduction at desk scale: synthetic corpus generation,
/// encoder-decoder training with intermediate-layer-output regularization,
/// regime comparison, tap-layer sweeps, and hybrid CTC/attention decoding.
#[derive(Parser)]
#[command(name = "ilo-asr", version)]
struct Cli {
    /// Configuration file of flat `key = value` lines
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Per-utterance decode parallelism
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into corpus.dir
    Gen,
    /// Train the configured regime: per-epoch checkpoints, metrics CSV, and
    /// a best-5-averaged final model
    Train,
    /// Train all three regimes from one shared initialization and emit
    /// per-epoch validation-accuracy curves
    Compare,
    /// Train the regularized regime once per tap layer and emit per-layer
    /// test WER
    SweepLayer,
    /// Decode the test set (ctc | attention | hybrid) with a trained model
    Decode,
}

fn run(cli: Cli) -> ilo_asr::Result<()> {
    let raw = RawConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let rs = RunSettings::resolve(&raw)?;
    match cli.command {
        Command::Gen => cmd_gen(&rs),
        Command::Train => cmd_train(&rs).map(|_| ()),
        Command::Compare => cmd_compare(&rs).map(|_| ()),
        Command::SweepLayer => cmd_sweep_layer(&rs).map(|_| ()),
        Command::Decode => cmd_decode(&rs, cli.jobs).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
