mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use treeclust_core::Error;

#[derive(Parser)]
#[command(name = "treeclust", version, about = "Contrastive hierarchical clustering with soft decision trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint against labelled data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset TOML, run config, or image-folder directory.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the report and distance matrix (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the learned hierarchy.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
        /// Dataset used for node composition (default: the run's own).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render a learning-curve log or a distance matrix as SVG.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportFormat {
    JsonTree,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PlotKind {
    Curves,
    Heatmap,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Eval { ckpt, data, out } => commands::eval(&ckpt, &data, out.as_deref()),
        Command::Export {
            ckpt,
            format,
            out,
            data,
        } => commands::export(&ckpt, format, &out, data.as_deref()),
        Command::Plot { input, kind, out } => plot::plot(&input, kind, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
