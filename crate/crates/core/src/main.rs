use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modalanchor_core::cli;
use modalanchor_core::Error;

#[derive(Parser)]
#[command(
    name = "modalanchor",
    version,
    about = "Continual learning experiments on a toy dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the strategy x seed matrix of a config.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --set trainer.lr=0.01
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge completed runs into one report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule and loss.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            sets,
            out,
            jobs,
        } => {
            let summary = cli::cmd_run(config.as_deref(), &sets, out.as_deref(), jobs)?;
            print!("{}", std::fs::read_to_string(summary.out.join("summary.md"))?);
            println!("artifacts in {}", summary.out.display());
        }
        Command::Report { input, out } => {
            let report = cli::cmd_report(&input, out.as_deref())?;
            print!("{}", cli::render_report(&report));
        }
        Command::Gradcheck => {
            cli::cmd_gradcheck(&mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
