//! Command-line front end. Each subcommand is a thin wrapper over a
//! pipeline function; all experiment knobs live in the TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splinter_cli::config::ExperimentConfig;
use splinter_cli::error::Result;
use splinter_cli::{pipeline, report};

#[derive(Parser)]
#[command(name = "splinter", about = "Split one network into a trained sub-network ensemble")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an ensemble, single-model or deep-ensemble experiment.
    TrainEnsemble {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a sequential multi-task experiment (masked or naive).
    ClRun {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a saved model file (or a directory of member models) on a
    /// data directory holding test.csv or images.idx + labels.idx.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rerun the ensemble pipeline across several values of one knob
    /// (p, lambda or members) and tabulate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated list, e.g. 30,50,70,80.
        #[arg(long)]
        values: String,
    },
    /// Summarize every report.json under a directory as CSV on stdout.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainEnsemble { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rep = pipeline::run_ensemble(&cfg)?;
            println!(
                "{}: test accuracy {:.2}%, ece {:.4}, overhead {:.3}",
                rep.label, rep.results.test_accuracy_pct, rep.results.ece, rep.results.overhead
            );
            println!("report: {}", cfg.out_dir.join("report.json").display());
        }
        Cmd::ClRun { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rep = pipeline::run_cl(&cfg)?;
            println!(
                "{}: continual accuracy {:.4}, first-task drop {:.2} points",
                rep.label, rep.cl_accuracy, rep.first_task_drop_pct
            );
            println!("report: {}", cfg.out_dir.join("report.json").display());
        }
        Cmd::Eval { model, data } => {
            let (n, acc) = pipeline::eval_saved(&model, &data)?;
            println!("{{\"samples\": {n}, \"accuracy_pct\": {acc}}}");
        }
        Cmd::Sweep { config, param, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let csv = pipeline::run_sweep(&cfg, &param, &values)?;
            println!("sweep table: {}", csv.display());
        }
        Cmd::Report { dir } => {
            let rows = report::summarize_dir(&dir)?;
            print!("{rows}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
