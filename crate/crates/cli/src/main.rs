//! `apt`: data generation, pretraining, prompt tuning and evaluation.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Context;
use error::CliError;

#[derive(Parser)]
#[command(name = "apt", version, about = "Adaptive prompt tuning for pixel-wise anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSVs (and the dataset for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write rendered score maps here.
    #[arg(long)]
    render: Option<PathBuf>,
    /// Threads for per-image scoring.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train/test split as PGM files.
    GenData(Common),
    /// Pretrain the encoder and save its checkpoint.
    Pretrain(Common),
    /// Tune prompts on the few-shot split.
    Train(Common),
    /// Pixel AUROC of the tuned prompts.
    Eval(Common),
    /// Finite-difference check of the loss gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Render tuned score maps for the test split.
    Render(Common),
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let ctx = |c: &Common| Context::load(&c.config, c.seed, c.out.clone(), c.jobs);
    match &cli.command {
        Command::GenData(c) => commands::gen_data(&ctx(c)?),
        Command::Pretrain(c) => commands::pretrain(&ctx(c)?),
        Command::Train(c) => commands::train(&ctx(c)?),
        Command::Eval(c) => commands::eval(&ctx(c)?, c.render.as_deref()),
        Command::Gradcheck { common, cases } => commands::gradcheck(&ctx(common)?, *cases),
        Command::Render(c) => commands::render(&ctx(c)?, c.render.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
