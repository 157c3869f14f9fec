//! `ngc`: data generation, training, evaluation, prediction, gradient checks
//! and ablations for the joint motion prediction and recognition model.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ngc_core::model::Variant;
use ngc_core::skeleton::GraphMode;

use crate::config::Settings;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ngc", version, about = "Joint human motion prediction and action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic SKEL1 dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Compare a checkpoint against the zero-velocity baseline.
    Eval(EvalArgs),
    /// Predict future frames for every sequence of a SKEL1 file.
    Predict(PredictArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train model variants over several seeds and compare them.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    per_class: usize,
    #[arg(long, default_value_t = 17)]
    joints: usize,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Hyperparameters shared by `train` and `ablate`. Unset flags fall back to
/// the config file, then to built-in defaults.
#[derive(Debug, Default, PartialEq, Args)]
struct HyperArgs {
    /// Plain-text `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    huber_beta: Option<f64>,
    #[arg(long)]
    gamma_p: Option<f64>,
    #[arg(long)]
    tf_decay: Option<f64>,
    #[arg(long)]
    crf_alpha: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    graph: Option<GraphMode>,
    #[arg(long)]
    shared_qk: Option<bool>,
    #[arg(long)]
    batchnorm: Option<bool>,
    #[arg(long)]
    tc_hidden: Option<usize>,
}

impl HyperArgs {
    /// Defaults, then the config file, then flags.
    fn settings(&self, seed: Option<u64>) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            s.apply_file(&text)?;
        }
        let t = &mut s.train;
        macro_rules! take {
            ($($src:expr => $dst:expr),* $(,)?) => {
                $(if let Some(v) = $src { $dst = v; })*
            };
        }
        take! {
            self.lambda => t.lambda,
            self.epochs => t.epochs,
            seed => t.seed,
            self.batch_size => t.batch_size,
            self.lr => t.lr,
            self.lr_decay => t.lr_decay,
            self.lr_decay_every => t.lr_decay_every,
            self.huber_beta => t.huber_beta,
            self.gamma_p => t.gamma_p,
            self.tf_decay => t.tf_decay,
            self.crf_alpha => t.crf_alpha,
            self.val_fraction => t.val_fraction,
            self.tau => s.tau,
            self.horizon => s.horizon,
            self.variant => s.variant,
            self.graph => s.graph,
            self.shared_qk => s.shared_qk,
            self.batchnorm => s.batchnorm,
            self.tc_hidden => s.tc_hidden,
        }
        Ok(s)
    }

    /// Whether anything besides `--epochs` was given.
    fn sets_more_than_epochs(&self) -> bool {
        *self
            != HyperArgs {
                epochs: self.epochs,
                ..HyperArgs::default()
            }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// SKEL1 training data.
    #[arg(long)]
    data: PathBuf,
    /// Best checkpoint; the latest one goes to `<out>.last`.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log. Defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint. Only `--epochs` may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-epoch lines.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Horizons in frames.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,10")]
    horizons: Vec<usize>,
    /// Also write the MAE table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// SKEL1 file; the last τ frames of each sequence are observed.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    /// SKEL1 file of predicted frames.
    #[arg(long)]
    out: PathBuf,
    /// Optional long-format pose dump for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Coordinates sampled per model parameter in the composite check.
    #[arg(long, default_value_t = 4)]
    per_param: usize,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out SKEL1 data. Without it each run is scored on its validation split.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "full,no-ngc,no-bilstm")]
    variants: Vec<Variant>,
    /// Comparison CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One thread per variant.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
