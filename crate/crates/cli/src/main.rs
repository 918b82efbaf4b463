mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "latmem", version, about = "Latent factual memory: train, encode, store and evaluate")]
pub struct Cli {
    /// TOML run configuration layered over the selected profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base profile: `desk` or `paper-scale`.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,
    /// Override one value, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a corpus file, synthetic or sampled from a QA JSONL file.
    GenData {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Stage 1: train the decoder to copy texts after the start token.
    TrainAlign {
        /// Checkpoint whose weights serve as the frozen backbone in adapter mode.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Stage 2: train the encoder by progressive latent substitution.
    TrainSub,
    /// Encode a text into a latent matrix (JSON).
    Encode {
        #[arg(long)]
        text: String,
    },
    /// Decode a latent matrix written by `encode`.
    Decode {
        #[arg(long)]
        latent: PathBuf,
    },
    /// Encode then decode a text and score the round trip.
    Reconstruct {
        #[arg(long)]
        text: String,
    },
    /// Encode a text, quantize the latent and report the error.
    Quantize {
        #[arg(long)]
        text: String,
    },
    /// Add texts to the memory store, or the corpus eval split with `--corpus`.
    StoreInsert {
        #[arg(long)]
        text: Vec<String>,
        #[arg(long)]
        corpus: bool,
    },
    /// Rank stored records against a query.
    StoreRetrieve {
        #[arg(long)]
        query: String,
        #[arg(long)]
        top_k: Option<usize>,
        /// Decode the best record back to text.
        #[arg(long)]
        decode: bool,
    },
    /// Reconstruction metrics on the eval split, dense and quantized.
    EvalRecon,
    /// Self and paraphrase retrieval metrics on the eval split.
    EvalRetrieval,
    /// Reconstruction under Gaussian latent noise.
    NoiseSweep,
    /// Reconstruction bucketed by text length.
    CompressSweep,
    /// Reconstruction as stored latents decay toward the store mean.
    ForgetSim,
    /// Latent-row sensitivity to single-sentence substitutions.
    AssignMap {
        /// Sentences per probe paragraph.
        #[arg(long, default_value_t = 3)]
        sentences: usize,
    },
    /// Print the tensor manifest of a checkpoint and audit its offsets.
    CkptInfo {
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
