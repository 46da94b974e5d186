use std::path::PathBuf;
use std::process::ExitCode;

use aoii_lab::experiment::{self, ExperimentConfig, RunOptions};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aoii-lab", version, about = "Pull-sampling experiments for remote estimation of Markov sources")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (overrides `workers` in the config).
        #[arg(long)]
        workers: Option<usize>,
        /// Also write a single-run trace.
        #[arg(long)]
        trace: bool,
    },
}

const CONFIG_ERROR: u8 = 2;
const CALIBRATION_FAILURE: u8 = 3;

fn main() -> ExitCode {
    let Command::Run { config, out, workers, trace } = Cli::parse().command;
    let cfg = match ExperimentConfig::load(&config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    match experiment::execute(&cfg, &RunOptions { out_dir: out, workers, trace }) {
        Ok(s) => {
            println!("{} rows written to {}", s.rows, s.out_dir.display());
            if s.failures > 0 {
                eprintln!("{} rows failed calibration", s.failures);
                return ExitCode::from(CALIBRATION_FAILURE);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { CONFIG_ERROR } else { 1 })
        }
    }
}
