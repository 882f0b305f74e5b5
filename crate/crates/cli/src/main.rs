//! `swcrt`: run stepped-wedge simulation grids and tabulate the results.
//!
//! Exit codes: 0 success, 2 configuration error, 3 file system error.

mod config;
mod report;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "swcrt",
    version,
    about = "Stepped-wedge cohort trial simulation study runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of a configuration and write replicate records,
    /// a summary CSV and a manifest.
    Simulate {
        /// TOML or JSON configuration file.
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Run a named preset instead of (or on top of) a configuration file.
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SWCRT_WORKERS")]
        workers: Option<usize>,
        /// Overrides the master seed of every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the replicate count of every scenario.
        #[arg(long)]
        n_sim: Option<usize>,
        /// Use non-converged fits in the performance measures.
        #[arg(long)]
        include_nonconverged: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Tabulate a finished run from its replicate records.
    Summarize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "grid")]
        layout: report::Layout,
        #[arg(long, value_enum, default_value = "text")]
        format: report::Format,
    },
    /// Emit long-format CSV series for a figure.
    Plotdata {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        figure: report::Figure,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn emit(bytes: &[u8], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => {
            std::fs::write(p, bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        }
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::Io(format!("stdout: {e}"))),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            config,
            preset,
            out,
            workers,
            seed,
            n_sim,
            include_nonconverged,
            quiet,
        } => {
            let mut file = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                    config::parse(&text, path)?
                }
                None => config::ConfigFile::default(),
            };
            file.presets.extend(preset);
            if n_sim.is_some() {
                file.n_sim = n_sim;
                for s in &mut file.scenarios {
                    s.n_sim = None;
                }
            }
            if let Some(seed) = seed {
                file.master_seed = Some(seed);
            }
            if include_nonconverged {
                file.exclude_nonconverged = Some(false);
            }
            let scenarios = config::expand(&file)?;
            let workers = workers.unwrap_or_else(default_workers).max(1);
            let manifest = run::simulate(scenarios, config.as_deref(), &out, workers, quiet)?;
            if !quiet {
                eprintln!(
                    "{} scenarios in {:.1}s; results in {}",
                    manifest.scenarios.len(),
                    manifest.total_seconds,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Summarize {
            run,
            layout,
            format,
        } => emit(&report::summarize(&run, layout, format)?, None),
        Command::Plotdata { run, figure, out } => {
            emit(&report::plotdata(&run, figure)?, out.as_deref())
        }
        Command::Presets => {
            for name in config::PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
