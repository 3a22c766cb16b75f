use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fora_core::commands::{execute, ArmChoice, Command, Invocation};
use fora_core::config::FileConfig;
use fora_core::ForaError;

#[derive(Parser)]
#[command(name = "fora", version = fora_core::output::version_string(), about = "Fisher-selected Stiefel LoRA on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; omitted keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the task, selection and adapters; protocols use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_arm(s: &str) -> Result<ArmChoice, String> {
    ArmChoice::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ArmChoice::ALL.iter().map(|a| a.name()).collect();
        format!("unknown arm {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Sub {
    /// Fisher-score every layer and report the top-K selection.
    Score(Common),
    /// Train one arm and write its step log and adapter checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fora", value_parser = parse_arm)]
        arm: ArmChoice,
    },
    /// Spectra, effective rank, update norms and KL drift of trained adapters.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fora", value_parser = parse_arm)]
        arm: ArmChoice,
        /// Adapter checkpoint to analyze instead of training one.
        #[arg(long)]
        adapters: Option<PathBuf>,
    },
    /// Fisher on/off by Stiefel on/off.
    Ablate(Common),
    /// FG-LoRA and FoRA across a grid of K.
    SweepK(Common),
    /// Parameter-matched comparison at half the full-LoRA budget.
    Matched(Common),
    /// Generate the planted-layer task and write base and teacher checkpoints.
    GenTask(Common),
}

fn run(cli: Cli) -> Result<usize, ForaError> {
    let (command, common) = match cli.command {
        Sub::Score(c) => (Command::Score, c),
        Sub::Train { common, arm } => (Command::Train { arm }, common),
        Sub::Diag { common, arm, adapters } => (Command::Diag { arm, adapters }, common),
        Sub::Ablate(c) => (Command::Ablate, c),
        Sub::SweepK(c) => (Command::SweepK, c),
        Sub::Matched(c) => (Command::Matched, c),
        Sub::GenTask(c) => (Command::GenTask, c),
    };
    let config = match &common.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let outcome = execute(&Invocation {
        command,
        config,
        seed: common.seed,
        out: common.out,
    })?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    Ok(outcome.aborted)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("error: {n} run(s) aborted numerically; partial results were written");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
