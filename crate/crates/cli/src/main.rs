mod config;
mod error;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mgk", version, about = "Mixture-of-keys attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the experiment described by a JSON config.
    Run {
        /// Config path (same as --config).
        #[arg(value_name = "CONFIG", conflicts_with = "config")]
        path: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve_out(config_path: &Path, config: &ExperimentConfig, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let out = match (flag, &config.out_dir) {
        (Some(p), _) => p,
        (None, Some(p)) if p.is_relative() => config_path.parent().unwrap_or(Path::new(".")).join(p),
        (None, Some(p)) => p.clone(),
        (None, None) => PathBuf::from("mgk-out"),
    };
    if out.is_absolute() {
        return Ok(out);
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::Validation(format!("cannot resolve {}: {e}", out.display())))?;
    Ok(cwd.join(out))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let Cmd::Run { path, config, out, seed } = cli.command;
    let path = path
        .or(config)
        .ok_or_else(|| CliError::Validation("a config path is required (--config <path>)".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = resolve_out(&path, &cfg, out)?;
    for p in run::run(&cfg, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mgk: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
