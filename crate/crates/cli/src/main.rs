use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "unravel", about = "Master-equation solvers and trajectory unravelings", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run described by a JSON configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for results.csv and manifest.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Propagate the flow matrix and report per-time CP diagnostics.
    CheckCp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = unravel_cli::init_threads();
    let code = match cli.command {
        Command::Run { config, seed, out } => {
            let _ = threads;
            unravel_cli::run_from_path(&config, seed, &out)
        }
        Command::CheckCp { config, out } => {
            // check-cp ignores the engine field and always runs the diagnostic.
            let raw = match std::fs::read_to_string(&config) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    std::process::exit(unravel_cli::EXIT_CONFIG);
                }
            };
            let mut v: serde_json::Value = match serde_json::from_str(&raw) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("error: invalid JSON: {e}");
                    std::process::exit(unravel_cli::EXIT_CONFIG);
                }
            };
            v["engine"] = serde_json::json!("check_cp");
            match unravel_cli::config::RunConfig::from_json(v) {
                Ok(cfg) => match unravel_cli::run(&cfg, &out) {
                    Ok(()) => unravel_cli::EXIT_OK,
                    Err(e) => {
                        eprintln!("error: {e}");
                        unravel_cli::exit_code_for(&e)
                    }
                },
                Err(e) => {
                    eprintln!("error: {e}");
                    unravel_cli::EXIT_CONFIG
                }
            }
        }
    };
    std::process::exit(code);
}
