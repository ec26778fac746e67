use clap::{Parser, Subcommand};
use sdkt::cli::{cmd_rank_ref, cmd_report, cmd_run, RunOptions};
use sdkt::error::Error;
use sdkt::metrics::Regime;
use sdkt::protocol::Method;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sdkt",
    about = "Dual-teacher continual-learning experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method over all rotated sequences and seeds.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for matrices, traces, rankings, and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed list (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the training method.
        #[arg(long)]
        method: Option<String>,
        /// Override the evaluation regime.
        #[arg(long)]
        regime: Option<String>,
        /// Parallel workers over (seed, sequence) jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize one or more run directories into a method x sequence table.
    Report {
        /// Path of the summary CSV to write.
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
        /// Run directories produced by `run`.
        dirs: Vec<PathBuf>,
    },
    /// Print the top-k selection-ranked reference samples of one stage.
    RankRef {
        /// Run directory produced by `run`.
        #[arg(long)]
        out: PathBuf,
        /// Stage index (1-based).
        #[arg(long)]
        stage: usize,
        /// Number of samples to print.
        #[arg(long)]
        top: usize,
        /// Sequence index (1-based).
        #[arg(long, default_value_t = 1)]
        seq: usize,
        /// Seed to read (defaults to the run's first seed).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> sdkt::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            method,
            regime,
            jobs,
        } => {
            let opts = RunOptions {
                seeds,
                method: method.as_deref().map(str::parse::<Method>).transpose()?,
                regime: regime.as_deref().map(str::parse::<Regime>).transpose()?,
                jobs,
            };
            cmd_run(&config, &out, &opts)
        }
        Command::Report { out, dirs } => cmd_report(&dirs, &out),
        Command::RankRef {
            out,
            stage,
            top,
            seq,
            seed,
        } => cmd_rank_ref(&out, stage, top, seq, seed, &mut std::io::stdout()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
