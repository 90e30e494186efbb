use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lvnet::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "lvnet", version, about = "Multi-frame infrared small target detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/val sequence datasets.
    Synth {
        /// JSON generator spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_train: usize,
        #[arg(long, default_value_t = 4)]
        n_val: usize,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model, writing a checkpoint and loss log after every epoch.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory, or a synth output holding `train/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `train.max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `<out>/last.ckpt` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; prints a JSON metric report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory, or a synth output holding `val/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the model config threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write `report.json` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep thresholds; prints a `threshold,Pd,Fa` CSV.
    Roc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write `roc.csv` into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter count in millions.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the FLOPs of one clip in billions.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
    /// Build the table for one ablation axis; trains and evaluates each row when `--data` is given.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training epochs per row; defaults to `train.max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the table and per-row training output here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Config(_) | Error::Validation(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::Training(_) | Error::Internal(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lvnet: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
