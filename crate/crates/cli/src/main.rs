use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dnggb::experiment::{run, ExperimentConfig, ExperimentError, RunOptions};
use dnggb::solutions::catalogue;

#[derive(Parser)]
#[command(name = "dnggb", version, about = "Worldsheet phase-space experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Report path; overrides the config. Stdout if neither is given.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record wall-clock timings (makes the report non-reproducible).
        #[arg(long)]
        timings: bool,
    },
    /// Print the available exact solutions.
    ListSolutions,
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn fail(e: &ExperimentError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListSolutions => {
            let mut out = std::io::stdout().lock();
            for (name, param, about) in catalogue() {
                let _ = writeln!(out, "{name}\t{param}\t{about}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                println!("ok: {} on {}", cfg.experiment.kind(), config.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            config,
            out,
            seed,
            timings,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output.report = out;
            }
            let report = match run(&cfg, RunOptions { timings }) {
                Ok(r) => r,
                Err(e) => return fail(&e),
            };
            if cfg.output.report.is_none() {
                if let Err(e) = std::io::stdout()
                    .write_all(report.to_json().as_bytes())
                    .context("writing report to stdout")
                {
                    eprintln!("error: {e:#}");
                    return ExitCode::from(3);
                }
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                eprintln!("tolerance failure in {} experiment", cfg.experiment.kind());
                ExitCode::from(1)
            }
        }
    }
}
