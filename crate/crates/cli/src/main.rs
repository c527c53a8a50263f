use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;

/// Desk-scale motion-sensitive contrastive pre-training on synthetic videos.
#[derive(Parser, Debug)]
#[command(name = "mscl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a labelled synthetic corpus to disk.
    GenData(GenDataArgs),
    /// Score every candidate clip window and mark the sampled ones.
    ScoreClips(ScoreClipsArgs),
    /// Pre-train the dual encoder and write a checkpoint, metrics and run manifest.
    Pretrain(PretrainArgs),
    /// Linear probe on frozen backbone features.
    Probe(EvalArgs),
    /// Nearest-neighbour retrieval (R@k) on frozen backbone features.
    Retrieve(RetrieveArgs),
    /// Finite-difference check of every contrastive loss.
    Gradcheck(GradcheckArgs),
    /// Render a metrics TSV as an SVG line chart.
    Plot(PlotArgs),
    /// Write one RGB frame and its colour-coded flow as PPM images.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    /// Frame height and width in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    /// Frame gap of the stored flow.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing corpus in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ScoreClipsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    clip_len: usize,
    /// Defaults to the corpus flow stride.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; scoring draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from an ablation preset before the file and flags are applied.
    #[arg(long)]
    row: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint written by `pretrain`; omit together with --random-init.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a freshly initialised encoder built from the config flags.
    #[arg(long)]
    random_init: bool,
    /// Gradient-descent epochs of the linear probe.
    #[arg(long, default_value_t = 300)]
    probe_epochs: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// Optional TSV of `k`, `recall`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = mscl::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; plotting draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Position of the video in the corpus manifest.
    #[arg(long, default_value_t = 0)]
    video: usize,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Also render the flow rotated by this many radians.
    #[arg(long)]
    rotate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; rendering draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Exit status for a failed command: 2 for numerical failures, 1 otherwise.
fn failure_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<mscl::Error>(), Some(mscl::Error::Numerical(_))))
        || err.downcast_ref::<commands::NumericalFailure>().is_some();
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::ScoreClips(a) => commands::score_clips(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Plot(a) => commands::plot(a),
        Command::Visualize(a) => commands::visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(failure_code(&e))
        }
    }
}
