mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes, kept distinct so scripts can tell failure classes apart.
pub mod exit_codes {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const MISSING_INPUT: u8 = 3;
    pub const DIVERGENCE: u8 = 4;
    pub const CHECK_FAILED: u8 = 5;
}

#[derive(Parser)]
#[command(
    name = "tether",
    version,
    about = "Drift-constrained encoder fine-tuning workflows",
    after_help = "Exit codes: 0 ok, 2 config error, 3 missing input, 4 numerical divergence, 5 check failure, 1 other."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file (one flat document per run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset (data.csv + spec.json).
    GenData,
    /// Pretrain the reference encoder on the pretraining split.
    Pretrain,
    /// Fine-tune from a pretrained checkpoint.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval,
    /// Compare analytic loss gradients against finite differences.
    Gradcheck,
    /// Train + evaluate across a list of drift weights.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Sweep => "sweep",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = match commands::Context::prepare(
        cli.command.name(),
        cli.config.as_deref(),
        &cli.out,
        cli.seed,
    ) {
        Ok(ctx) => ctx,
        Err(e) => return fail(e),
    };
    let result = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
        Command::Sweep => commands::sweep(&ctx),
    };
    match result {
        Ok(()) => ExitCode::from(exit_codes::OK),
        Err(e) => fail(e),
    }
}

fn fail(e: commands::CliError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
