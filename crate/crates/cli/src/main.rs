mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multimodal continuous emotion recognition: preprocessing, training,
/// prediction and reporting.
#[derive(Parser, Debug)]
#[command(name = "afusion", version)]
struct Cli {
    /// Log progress (per-epoch lines during training).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align every modality of every manifest trial and write the store.
    Preprocess(PreprocessArgs),
    /// Train one or all folds over a list of seeds.
    Train(TrainArgs),
    /// Write per-frame predictions of a checkpoint for every manifest trial.
    Predict(PredictArgs),
    /// Tabulate the selected runs under one or more output directories.
    Report(ReportArgs),
    /// Generate a synthetic corpus with planted, learnable signals.
    Synth(SynthArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Store directory for record files and folds.json.
    #[arg(long)]
    out: PathBuf,
    /// Seed of the subject shuffle behind the generated folds.
    #[arg(long, default_value_t = 0)]
    fold_seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated subset of visual,audio,linguistic.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    leader: Option<String>,
    /// Fold index 0..=5 or `all`.
    #[arg(long)]
    fold: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// Defaults to `<store>/folds.json`.
    #[arg(long)]
    folds_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    max_epoch: Option<String>,
    /// Any configuration field as `key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Store holding the preprocessed trials of the manifest.
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output directories of `train`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    #[arg(long, default_value_t = 4)]
    subjects: usize,
    #[arg(long, default_value_t = 1)]
    val_subjects: usize,
    #[arg(long, default_value_t = 0)]
    test_trials: usize,
    #[arg(long, default_value_t = 400)]
    n_frames: usize,
    #[arg(long, default_value_t = 0)]
    n_jitter: usize,
    /// Comma-separated per-trial lengths (labelled trials first).
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 1)]
    sentinel_runs: usize,
    #[arg(long, default_value_t = 2)]
    missing_frames: usize,
    #[arg(long, default_value_t = 768)]
    linguistic_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose {
        "info"
    } else {
        "warn"
    }))
    .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
