//! Command-line front end: `svelift run` and `svelift validate`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svelift::experiments::{execute, prepare, RunOptions};

#[derive(Parser)]
#[command(name = "svelift", version, about = "Markovian lifts of stochastic Volterra equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Worker threads for trajectory parallelism.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed_override, threads } => execute(&RunOptions {
            config,
            out,
            seed_override,
            threads,
        })
        .map(|s| {
            for line in &s.outcome.summary {
                println!("{line}");
            }
            println!(
                "{}: {} (artifacts in {})",
                s.outcome.verdict["experiment"].as_str().unwrap_or("experiment"),
                if s.outcome.pass { "pass" } else { "fail" },
                s.dir.display()
            );
        }),
        Command::Validate { config } => prepare(&RunOptions {
            config: config.clone(),
            ..Default::default()
        })
        .map(|c| println!("{}: valid {} configuration", config.display(), c.experiment.tag())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
