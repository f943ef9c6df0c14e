mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use texstat::gradsuite::Suite;
use texstat::metrics::GeMode;
use texstat::Error;

#[derive(Parser, Debug)]
#[command(
    name = "texstat",
    version,
    about = "Statistical-texture lesion segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic image/mask dataset.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints, a loss trace and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the probability map and binary mask for one image.
    Predict(PredictArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Dump the quantized intensity embedding of an image's luminance.
    KscoDump(KscoDumpArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    tail_weight: f64,
    /// Config whose model constraints the size must satisfy (toy model by default).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    data: PathBuf,
    /// key = value config file (a previous run's manifest also works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Config overrides as `--key value` or `--key=value`, e.g. `--enable-stft false`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GeArg {
    Arithmetic,
    Geometric,
}

impl From<GeArg> for GeMode {
    fn from(g: GeArg) -> Self {
        match g {
            GeArg::Arithmetic => GeMode::Arithmetic,
            GeArg::Geometric => GeMode::Geometric,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV report path.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = GeArg::Arithmetic)]
    ge: GeArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probability PNG; the binary mask goes next to it as `<stem>_mask.png`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// all, tensor, ksco, attention, stft, stet or loss.
    #[arg(long, default_value = "all")]
    module: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct KscoDumpArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 16)]
    levels: usize,
    /// Output prefix: writes `<out>.png` and `<out>.txt`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    excess_kurtosis: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical(_) | Error::Domain(_) => 3,
        _ => 2,
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("TEXSTAT_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                texstat::exec::init_threads(n);
            }
            _ => log::warn!("ignoring TEXSTAT_THREADS={v:?}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::KscoDump(a) => commands::ksco_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
