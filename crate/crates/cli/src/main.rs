//! `minimt`: synthetic-corpus translation experiments from the command
//! line. `gen-data` then `pretrain`, `train-base`, `train-ckd` form the
//! pipeline; `translate`, `evaluate`, and `ablate` consume its artifacts.
//!
//! Every run is deterministic under its seed, and every run directory
//! receives the fully resolved configuration. Exit codes: 0 success,
//! 2 configuration error, 3 data error, 4 contract violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use minimt::error::{Error, Result};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "minimt",
    version,
    about = "Two-stage low-resource translation with complementary knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence, lowest to highest:
/// built-in defaults, `--config` file, `--set` overrides in order, then
/// the dedicated flags.
#[derive(Args)]
struct Common {
    /// Experiment config file (key = value lines)
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Global random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                Error::config(format!("--set expects key=value, got {kv:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.apply("seed", &seed.to_string())?;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bilingual corpus and vocabulary
    GenData {
        #[command(flatten)]
        common: Common,
        /// Task rule: "cipher" or "cipher+reverse"
        #[arg(long)]
        task: Option<String>,
        /// Overwrite existing corpus files
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the encoder with masked-token prediction
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the translation decoder on the frozen pretrained encoder
    TrainBase {
        #[command(flatten)]
        common: Common,
    },
    /// Distill complementary teachers into the base model
    TrainCkd {
        #[command(flatten)]
        common: Common,
        /// Distillation weight in [0, 1]; 0 is plain NLL training
        #[arg(long)]
        alpha: Option<f64>,
        /// Number of teachers
        #[arg(long)]
        n_teachers: Option<usize>,
    },
    /// Translate a plain-text file, one sentence per line
    Translate {
        #[command(flatten)]
        common: Common,
        /// Source text file
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Where to write translations (default: stdout)
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        /// Checkpoint to decode with (default: the distilled one)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Beam width
        #[arg(long, default_value_t = minimt::eval::DEFAULT_BEAM_SIZE)]
        beam: usize,
        /// Longest translation to emit, in tokens
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score a checkpoint on a corpus split (BLEU-4 and chrF)
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: the distilled one)
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Which split to score: "valid" or "test"
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and score all four variants under one seed
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, task, force } => {
            let mut cfg = common.resolve()?;
            if let Some(task) = task {
                cfg.apply("task", &task)?;
            }
            commands::cmd_gen_data(&cfg, force)
        }
        Command::Pretrain { common } => commands::cmd_pretrain(&common.resolve()?),
        Command::TrainBase { common } => commands::cmd_train_base(&common.resolve()?),
        Command::TrainCkd { common, alpha, n_teachers } => {
            let mut cfg = common.resolve()?;
            if let Some(alpha) = alpha {
                cfg.apply("ckd.alpha", &alpha.to_string())?;
            }
            if let Some(n) = n_teachers {
                cfg.apply("ckd.n_teachers", &n.to_string())?;
            }
            commands::cmd_train_ckd(&cfg)
        }
        Command::Translate { common, input, output, checkpoint, beam, max_len } => {
            let cfg = common.resolve()?;
            commands::cmd_translate(&cfg, &input, output.as_deref(), checkpoint, beam, max_len)
        }
        Command::Evaluate { common, checkpoint, split } => {
            let cfg = common.resolve()?;
            commands::cmd_evaluate(&cfg, checkpoint, &split)
        }
        Command::Ablate { common } => commands::cmd_ablate(&common.resolve()?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Contract(_) | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("minimt: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
