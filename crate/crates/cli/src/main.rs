mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mogp-drmpc", version, about = "Distributionally robust tube MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Configuration file, or the name of a built-in preset.
    #[arg(long, default_value = "numerical")]
    pub config: String,
    /// Output directory; defaults to the one named in the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the command (training, campaign or instances).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone)]
pub struct CampaignArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Trains the mixture and single-GP disturbance models and saves them.
    Train(Common),
    /// Runs one controller over the campaign and writes per-run logs.
    Simulate {
        #[command(flatten)]
        args: CampaignArgs,
        #[arg(long, default_value = "mogp-dr")]
        controller: String,
    },
    /// Runs all three controllers with paired seeds; writes tables and plots.
    Compare(CampaignArgs),
    /// Checks the cone-program CVaR offsets against the discretized LP on
    /// random ambiguity sets.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Number of random instances.
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(common) => commands::train(&common),
        Command::Simulate { args, controller } => commands::simulate(&args, &controller),
        Command::Compare(args) => commands::compare(&args),
        Command::OracleCheck { common, runs } => commands::oracle_check(&common, runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
