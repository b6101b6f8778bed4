use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use isothermic_cli::{init_threads, run_file, PipelineConfig};

#[derive(Parser)]
#[command(name = "isothermic", about = "Dressing, frames and transforms of isothermic hypersurfaces and Guichard nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline; outputs are written relative to the config file.
    Run { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Version => {
            println!("isothermic {}", env!("CARGO_PKG_VERSION"));
            0
        }
        Command::Validate { config } => match PipelineConfig::load(&config).and_then(|c| c.validate()) {
            Ok(_) => {
                println!("{}: ok", config.display());
                0
            }
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
        Command::Run { config } => match init_threads().and_then(|_| run_file(&config)) {
            Ok(outcome) => {
                println!("{}", outcome.to_json());
                if !outcome.passed {
                    eprintln!("residual budget exceeded: {}", outcome.failed.join(", "));
                }
                outcome.exit_code()
            }
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
