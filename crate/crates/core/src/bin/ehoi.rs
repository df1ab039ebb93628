use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ehoi::cli::{self, Command};

#[derive(Parser)]
#[command(name = "ehoi", version, about = "Hand-object interaction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path overrides, e.g. `--seed 3 --train.schedule.batch_size=8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset with train/val/test splits.
    SynthGen(Common),
    /// Filter augmented images by structural similarity.
    AugValidate(Common),
    /// Dataset statistics per split and overall.
    Stats(Common),
    /// Train the interaction network under a regime.
    Train(Common),
    /// Score checkpoints or a saved run output.
    Eval(Common),
    /// Write predictions for a split.
    Infer(Common),
    /// Measure per-frame inference latency.
    Bench(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (cmd, common) = match Cli::parse().command {
        Cmd::SynthGen(c) => (Command::SynthGen, c),
        Cmd::AugValidate(c) => (Command::AugValidate, c),
        Cmd::Stats(c) => (Command::Stats, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Infer(c) => (Command::Infer, c),
        Cmd::Bench(c) => (Command::Bench, c),
    };
    let result = cli::load_config(common.config.as_deref(), &common.overrides).and_then(|cfg| cli::run(cmd, &cfg));
    match result {
        Ok(out) => {
            let _ = writeln!(std::io::stdout(), "{}", out.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
