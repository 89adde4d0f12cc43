mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit code 2.
const INPUT_ERROR: u8 = 2;
/// Exit code 3.
const TRAINING_ERROR: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or invalid input files.
    Input(String),
    /// Training aborted or every grid cell failed.
    Training(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => INPUT_ERROR,
            CliError::Training(_) => TRAINING_ERROR,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Training(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(name = "molmask", version, about = "Masked-node pre-training with re-weighted losses")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, env = "MOLMASK_THREADS")]
    threads: Option<usize>,
    /// Log progress (-v) or details (-vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Category distribution and power-law fit of a dataset.
    Stats {
        /// `smiles,target` CSV file.
        #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
        input: Option<PathBuf>,
        /// Synthetic generator config (JSON).
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-node pre-training; writes a checkpoint and its loss log.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `pretrain.scheme`.
        #[arg(long)]
        scheme: Option<String>,
        /// Overrides `pretrain.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tuning on the regression target from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "fresh", conflicts_with = "fresh")]
        checkpoint: Option<PathBuf>,
        /// Start from fresh parameters (no pre-training baseline).
        #[arg(long)]
        fresh: bool,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `finetune.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recall of masked-node prediction by category and group.
    Recall {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// `smiles,target` CSV file.
        #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
        data: Option<PathBuf>,
        /// Synthetic generator config (JSON).
        #[arg(long)]
        synth: Option<PathBuf>,
        /// Group file: `[{"name": "O,N", "members": ["O", "N"]}, ...]`.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// `1` node, `15%` or `0.15` of nodes.
        #[arg(long, default_value = "1", value_parser = config::parse_mask_mode)]
        mask_mode: molmask::pipeline::MaskMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Predict the true category; a sanity baseline.
        #[arg(long, hide = true)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train, evaluate and fine-tune every scheme × mask mode × seed.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit the CSV tables of a grid report.
    Report {
        /// `grid_report.json` from `molmask grid`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    match cli.command {
        Command::Stats { input, synth, out } => commands::stats(input, synth, &out),
        Command::Pretrain {
            config,
            out,
            scheme,
            epochs,
        } => commands::pretrain(&config, &out, scheme.as_deref(), epochs),
        Command::Finetune {
            config,
            checkpoint,
            fresh: _,
            out,
            epochs,
        } => commands::finetune(&config, checkpoint.as_deref(), &out, epochs),
        Command::Recall {
            checkpoint,
            data,
            synth,
            groups,
            mask_mode,
            seed,
            oracle,
            out,
        } => commands::recall(commands::RecallArgs {
            checkpoint,
            data,
            synth,
            groups,
            mask_mode,
            seed,
            oracle,
            out,
        }),
        Command::Grid { config, out } => commands::grid(&config, &out),
        Command::Report { grid, out } => commands::report(&grid, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
