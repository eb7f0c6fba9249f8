mod commands;
mod config;
mod plot;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Sensor-language pretraining toolkit.
#[derive(Parser, Debug)]
#[command(name = "slip", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=200` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parent directory for the run directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Directory that receives manifest.json and series/.
        #[arg(long)]
        dest: PathBuf,
    },
    /// Joint contrastive + captioning pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Caption-only finetuning of a pretrained checkpoint with augmentation.
    Sft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Linear probe on frozen mean-pooled encoder features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
    },
    /// Zero-shot classification and sensor-text recall.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Greedy captions with BLEU-4 and ROUGE-L against references.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Embedding geometry of a checkpoint and/or plots of a metric log.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// metrics.jsonl to render as SVG charts.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Paired Wilcoxon signed-rank test of two score files.
    StatsTest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Train and evaluate the ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Comma-separated subset of variants (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {}", commands::one_line(&e));
            ExitCode::from(code)
        }
    }
}
