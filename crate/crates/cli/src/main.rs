use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ignet_cli::{cmd_diagnose, cmd_evaluate, cmd_synth, cmd_train, RunOptions};
use ignet_core::data::image::{DEFAULT_COLS, DEFAULT_ROWS};
use ignet_core::train::Task;

#[derive(Parser)]
#[command(name = "ignet", version, about = "Train and diagnose convolutional networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`section.key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of labeled .pgm images; the synthetic corpus is used when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core. Overrides run.workers.
    #[arg(long, env = "IGNET_WORKERS")]
    workers: Option<usize>,
    /// Overrides run.task.
    #[arg(long)]
    task: Option<Task>,
}

impl Common {
    fn options(self) -> RunOptions {
        RunOptions {
            config: self.config,
            data: self.data,
            seed: self.seed,
            workers: self.workers,
            task: self.task,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print mean absolute values of the freshly initialized network.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Probe batch size. Overrides diag.probe.
        #[arg(long)]
        probe: Option<usize>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cross-validated training; writes model, history, metrics and categories.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a saved model on a data directory.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, env = "IGNET_WORKERS")]
        workers: Option<usize>,
    },
    /// Write a synthetic labeled corpus as .pgm files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = DEFAULT_ROWS)]
        rows: usize,
        #[arg(long, default_value_t = DEFAULT_COLS)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().command {
        Command::Diagnose { common, probe, report } => cmd_diagnose(&common.options(), probe, report.as_deref()),
        Command::Train { common, out } => cmd_train(&common.options(), &out),
        Command::Evaluate {
            model,
            data,
            task,
            workers,
        } => cmd_evaluate(&model, &data, task, workers),
        Command::Synth {
            out,
            classes,
            per_class,
            rows,
            cols,
            seed,
        } => cmd_synth(&out, classes, per_class, rows, cols, seed),
    };
    print!("{}", outcome.stdout);
    eprint!("{}", outcome.stderr);
    ExitCode::from(outcome.code as u8)
}
