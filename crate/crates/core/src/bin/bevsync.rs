//! Command-line front end: `run`, `train` and `check`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevsync::config::ExperimentConfig;
use bevsync::experiment;

/// Output directory used when `--out` is not given.
const OUT_DIR_ENV: &str = "BEVSYNC_OUT_DIR";

#[derive(Parser)]
#[command(version, about = "Asynchronous BEV alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep time offsets over all configured pipelines and write results.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also write every estimated dynamic flow field.
        #[arg(long)]
        dump_flow: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured learned estimators.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, ground-truth scatter and round-trip consistency checks.
    Check {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bevsync-out"))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> bevsync::Result<ExitCode> {
    match cli.command {
        Command::Run { config, dump_flow, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out_dir(out);
            std::fs::create_dir_all(&out)?;
            let models = experiment::prepare_models(&cfg, true)?;
            let dump = dump_flow.then(|| out.join("flows"));
            let sweep = experiment::run_sweep(&cfg, &models, dump.as_deref())?;
            let csv = out.join("results.csv");
            sweep.write_csv(&csv)?;
            for (stage, t) in &sweep.times.0 {
                eprintln!("{stage:>10}: {:.3} s", t.as_secs_f64());
            }
            println!("{}", csv.display());
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            for (kind, path) in experiment::train_command(&cfg, &out, true)? {
                println!("{}: {}", kind.name(), path.display());
            }
        }
        Command::Check { config } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let lines = experiment::check(&cfg)?;
            let ok = lines.iter().all(|l| l.passed);
            for l in lines {
                println!("{} {:<10} {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
