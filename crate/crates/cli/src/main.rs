// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tlens`: train, decode and analyze desk-scale transformers from the
//! command line. Every subcommand writes its artifacts plus a
//! `manifest.json` into `--out`.

mod commands;
mod heatmap;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "tlens", version, about = "Layer-wise decoding of transformer residual streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Extended,
    Debiased,
    Tuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    Iforest,
    Lof,
    Srm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Demos {
    None,
    Correct,
    Incorrect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Calib {
    None,
    Median,
}

/// Lens selection shared by the decoding subcommands.
#[derive(Args, Clone, Debug)]
pub struct LensArgs {
    /// Lens file; required for the tuned and debiased variants.
    #[arg(long)]
    pub lens: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Variant::Tuned)]
    pub variant: Variant,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on a raw byte corpus (first 90%).
    TrainModel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        config: Preset,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        checkpoint_every: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train translators on the lens slice of the corpus.
    TrainLens {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[arg(long, default_value_t = 1 << 14)]
        batch_tokens: usize,
        /// `tuned` trains full translators, `debiased` only their biases.
        #[arg(long, value_enum, default_value_t = Variant::Tuned)]
        variant: Variant,
        #[arg(long)]
        include_final_block: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer perplexity, KL to the output and marginal bias.
    EvalLens {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Marginal bias of selected layers.
    Bias {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        /// `all`, or a list such as `0,2,4-6`.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-entropy penalty of every translator at every layer.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lens: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Covariance similarity between hidden states of layer pairs.
    Covdrift {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all")]
        layers: String,
        /// Highest-variance dimensions dropped before comparing.
        #[arg(long, default_value_t = 0)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Causal basis extraction through the tuned lens.
    Cbe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lens: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 16)]
        n_seqs: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Lens-side against model-side influence of stored bases.
    Fidelity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bases: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_seqs: usize,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Stimulus-response alignment under resampling ablation.
    Align {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        #[arg(long)]
        bases: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Basis vectors resampled per layer.
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        n_seqs: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt-injection detection from prediction trajectories.
    InjectEval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = Detector::Lof)]
        detector: Detector,
        /// Score clean items on both sides.
        #[arg(long)]
        no_inject: bool,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Lens accuracy on a multiple-choice task at every layer.
    SweepAccuracy {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, value_enum, default_value_t = Demos::None)]
        demos: Demos,
        #[arg(long, value_enum, default_value_t = Calib::None)]
        calibration: Calib,
        #[command(flatten)]
        common: Common,
    },
    /// Prediction depth against iteration learned.
    Depth {
        /// Directory of checkpoints; file-name order is training order and
        /// the last one is the model the lens belongs to.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        lens: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient-residual alignment, layer deletion, random-cosine reference.
    Diagnostics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        /// Also compute the random-cosine percentile in this dimension.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Interpretability scores of weight-derived token lists.
    Staticlens {
        #[arg(long)]
        model: PathBuf,
        /// Tuned lens; the logit lens when absent.
        #[arg(long)]
        lens: Option<PathBuf>,
        /// Embedding table; defaults to the model's normalized unembedding.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        shuffles: usize,
        /// Comma-separated extractor names, or `all`.
        #[arg(long, default_value = "all")]
        extractors: String,
        #[command(flatten)]
        common: Common,
    },
    /// SVG grid of top-1 lens predictions per layer and position.
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        lens: LensArgs,
        /// Text to decode; otherwise the start of the corpus evaluation slice.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    use commands as c;
    match command {
        Command::TrainModel {
            corpus,
            config,
            steps,
            batch_size,
            seq_len,
            lr,
            checkpoint_every,
            common,
        } => c::train_model(&corpus, config, steps, batch_size, seq_len, lr, checkpoint_every, &common),
        Command::TrainLens {
            model,
            corpus,
            steps,
            seq_len,
            batch_tokens,
            variant,
            include_final_block,
            common,
        } => c::train_lens(&model, &corpus, steps, seq_len, batch_tokens, variant, include_final_block, &common),
        Command::EvalLens {
            model,
            corpus,
            lens,
            seq_len,
            common,
        } => c::eval_lens(&model, &corpus, &lens, seq_len, &common),
        Command::Bias {
            model,
            corpus,
            lens,
            layers,
            seq_len,
            common,
        } => c::bias(&model, &corpus, &lens, &layers, seq_len, &common),
        Command::Transfer {
            model,
            lens,
            corpus,
            seq_len,
            common,
        } => c::transfer(&model, &lens, &corpus, seq_len, &common),
        Command::Covdrift {
            model,
            corpus,
            layers,
            k,
            seq_len,
            common,
        } => c::covdrift(&model, &corpus, &layers, k, seq_len, &common),
        Command::Cbe {
            model,
            lens,
            corpus,
            layers,
            k,
            max_iter,
            n_seqs,
            seq_len,
            common,
        } => c::cbe(&model, &lens, &corpus, &layers, k, max_iter, n_seqs, seq_len, &common),
        Command::Fidelity {
            model,
            bases,
            corpus,
            n_seqs,
            seq_len,
            common,
        } => c::fidelity(&model, &bases, &corpus, n_seqs, seq_len, &common),
        Command::Align {
            model,
            lens,
            bases,
            corpus,
            k,
            n_seqs,
            seq_len,
            common,
        } => c::align(&model, &lens, &bases, &corpus, k, n_seqs, seq_len, &common),
        Command::InjectEval {
            model,
            lens,
            task,
            detector,
            no_inject,
            splits,
            bootstrap,
            common,
        } => c::inject_eval(&model, &lens, &task, detector, !no_inject, splits, bootstrap, &common),
        Command::SweepAccuracy {
            model,
            lens,
            task,
            demos,
            calibration,
            common,
        } => c::sweep_accuracy(&model, &lens, &task, demos, calibration, &common),
        Command::Depth {
            checkpoints,
            lens,
            task,
            common,
        } => c::depth(&checkpoints, &lens, &task, &common),
        Command::Diagnostics {
            model,
            corpus,
            seq_len,
            dim,
            n,
            common,
        } => c::diagnostics(&model, &corpus, seq_len, dim, n, &common),
        Command::Staticlens {
            model,
            lens,
            embeddings,
            layers,
            k,
            shuffles,
            extractors,
            common,
        } => c::staticlens(&model, lens.as_deref(), embeddings.as_deref(), &layers, k, shuffles, &extractors, &common),
        Command::Heatmap {
            model,
            lens,
            text,
            corpus,
            seq_len,
            common,
        } => c::heatmap(&model, &lens, text.as_deref(), corpus.as_deref(), seq_len, &common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
