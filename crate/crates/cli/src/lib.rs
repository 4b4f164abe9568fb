//! `pslu`: prepare corpora, pretrain, fine-tune, evaluate and predict.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use slu_core::model::ModelKind;

pub use error::{CliError, Result};

use crate::commands::FinetuneArgs;
use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "pslu", version, about = "Phone-level intent classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Transformer,
    Baseline,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Transformer => ModelKind::Transformer,
            KindArg::Baseline => ModelKind::Baseline,
        }
    }
}

/// Flags shared by the training subcommands; they override the config file.
#[derive(Debug, Clone, clap::Args)]
pub struct TrainFlags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub model: Option<KindArg>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            model: self.model.map(Into::into),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rebalance a split-annotated corpus into train/dev/test files.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phone and label statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with planted class signatures.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-phone pretraining; writes a checkpoint and a loss curve.
    Pretrain {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Intent fine-tuning with dev-set model selection.
    Finetune {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Start from a pretrained checkpoint (its vocabulary and encoder).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on a labeled corpus; writes a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label a corpus with a checkpoint's predictions.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prep {
            input,
            targets,
            seed,
            out,
        } => commands::prep(input, targets, *seed, out),
        Command::Stats { input, top_k, out } => commands::stats(input, *top_k, out),
        Command::Synth { spec, seed, out } => commands::synth(spec.as_deref(), *seed, out),
        Command::Pretrain {
            flags,
            corpus,
            out,
            loss_csv,
        } => commands::pretrain_cmd(
            flags.config.as_deref(),
            &flags.overrides(),
            corpus,
            out,
            loss_csv.as_deref(),
        ),
        Command::Finetune {
            flags,
            train,
            dev,
            init,
            out,
            history,
        } => commands::finetune_cmd(FinetuneArgs {
            config: flags.config.as_deref(),
            overrides: &flags.overrides(),
            train,
            dev,
            init: init.as_deref(),
            out,
            history: history.as_deref(),
        }),
        Command::Eval { ckpt, test, out } => commands::eval(ckpt, test, out),
        Command::Predict { ckpt, input, out } => commands::predict_cmd(ckpt, input, out),
    }
}
