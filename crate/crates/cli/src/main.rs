//! `pcvu`: generate synthetic data, pretrain, fine-tune, evaluate and
//! inspect files.
//!
//! Every command exits 0 on success. Failures print a single line
//! `error: <message>` on stderr and exit 1.

mod commands;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pcvu", version, about = "Human point-cloud video pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, clap::Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the command's stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory (`paths.data` for `gen`, `paths.out` otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Coloring {
    Part,
    Flow,
    None,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset: one container per sequence plus a manifest.
    Gen {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recompute the flow channel of every container in the dataset.
    FlowGt {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Masked-reconstruction pretraining on the training split.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the configured head, optionally from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrained checkpoint to initialise the backbone from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Share of each class of the training split to train on.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Evaluate a fine-tuned checkpoint on the test split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the header and summary statistics of a container or checkpoint.
    Inspect { file: PathBuf },
    /// Write one frame of a container as ASCII PLY.
    ExportPly {
        file: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = Coloring::Part)]
        color: Coloring,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the learnable parameter count of both stages.
    Params {
        /// Without a config the built-in defaults are used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { run } => commands::gen(&run),
        Command::FlowGt { run } => commands::flow_gt(&run),
        Command::Pretrain { run, resume } => commands::pretrain(&run, resume.as_deref()),
        Command::Finetune {
            run,
            checkpoint,
            fraction,
        } => commands::finetune(&run, checkpoint.as_deref(), fraction),
        Command::Eval { run, checkpoint } => commands::eval(&run, &checkpoint),
        Command::Inspect { file } => commands::inspect(&file),
        Command::ExportPly {
            file,
            frame,
            color,
            out,
        } => commands::export_ply(&file, frame, color, &out),
        Command::Params { config } => commands::params(config.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
