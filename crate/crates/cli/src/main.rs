//! `mega`: train, evaluate and inspect MEGA aspect sentiment classifiers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mega_absa::encoder::PoolingScope;

use crate::commands::MissingPath;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "mega", version, about = "MEGA aspect-based sentiment classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, last.ckpt and best.ckpt to the output directory.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Classify one aspect of one sentence.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Print the configuration and parameter census of a checkpoint.
    Inspect(InspectArgs),
}

/// Settings that may override the configuration file.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Run seed (initialization, word-vector fill, shuffling, dropout).
    #[arg(long)]
    seed: Option<u64>,
    /// Pooling scope of the classifier head.
    #[arg(long, value_parser = parse_pool)]
    pool: Option<PoolingScope>,
    /// Share of each sentence reversed by the partially flipped stream.
    #[arg(long)]
    flip_fraction: Option<f64>,
    /// Undo the prefix reversal after the flipped stream's convolution.
    #[arg(long, value_name = "true|false")]
    pf_double_flip: Option<bool>,
}

impl Overrides {
    fn any_model(&self) -> bool {
        self.pool.is_some() || self.flip_fraction.is_some() || self.pf_double_flip.is_some()
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.pool {
            cfg.pooling = p;
        }
        if let Some(f) = self.flip_fraction {
            cfg.flip_fraction = f;
        }
        if let Some(b) = self.pf_double_flip {
            cfg.pf_double_flip = b;
        }
    }
}

fn parse_pool(s: &str) -> Result<PoolingScope, String> {
    s.parse().map_err(|e: mega_absa::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training set, overriding `train_path`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Resume from this checkpoint (normally `<out>/last.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Configuration the checkpoint must agree with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the per-example prediction dump.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write `<out>/predictions.tsv`.
    #[arg(long, requires = "out")]
    dump: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentence text.
    #[arg(long)]
    sentence: String,
    /// Aspect term; must occur in the sentence.
    #[arg(long)]
    aspect: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corrupt the matmul adjoint to show that the suites catch it.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            if e.downcast_ref::<MissingPath>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
