use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use repflow::cli::{self, emit::OutputFormat, RunOptions};

#[derive(Parser)]
#[command(name = "repflow", version, about = "Replicator flows on the simplex and on Gaussian families")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Trajectory output path (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<OutputFormat>,
        #[arg(long)]
        seed: Option<u64>,
        /// Record wall-clock time in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Run the built-in verification checks.
    Verify {
        /// Report path (default `verify.report.json`).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        timing: bool,
    },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match args.command {
        Command::Run { config, output, format, seed, timing } => {
            let opts = RunOptions { output, format, seed, timing };
            cli::run(&config, &opts).map(|out| {
                if let Some(path) = &out.trajectory {
                    println!("trajectory: {}", path.display());
                }
                println!("report: {}", out.report.display());
                true
            })
        }
        Command::Verify { output, timing } => {
            let opts = RunOptions { output, timing, ..RunOptions::default() };
            cli::run_verify(&opts).map(|out| {
                for check in &out.report_data.checks {
                    println!("{}", check.line());
                }
                println!("report: {}", out.report.display());
                out.report_data.all_passed.unwrap_or(false)
            })
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        // Some verification check failed.
        Ok(false) => ExitCode::from(5),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
