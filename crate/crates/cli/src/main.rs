mod commands;
mod config;
mod escape;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure carrying the process exit status: 2 bad configuration or flags,
/// 3 unreadable input, 4 training divergence, 1 anything else.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Display) -> Self {
        CliError {
            code: 2,
            message: m.to_string(),
        }
    }

    pub fn input(m: impl Display) -> Self {
        CliError {
            code: 3,
            message: m.to_string(),
        }
    }

    pub fn diverged(m: impl Display) -> Self {
        CliError {
            code: 4,
            message: m.to_string(),
        }
    }
}

impl From<bltd::Error> for CliError {
    fn from(e: bltd::Error) -> Self {
        use bltd::Error as E;
        let code = match e {
            E::InvalidArgument(_) => 2,
            E::Io(_) | E::EmptyCorpus | E::Format(_) => 3,
            E::Divergence { .. } | E::NonFinite { .. } | E::NonFiniteGradient { .. } => 4,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "bltd", version, about = "Byte-level latent transformer with diffusion and speculative decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the patcher and train a model on a raw byte corpus.
    Train(TrainArgs),
    /// Generate bytes from a prompt.
    Generate(GenerateArgs),
    /// Run an engine sweep over a prompt set and write a cost CSV.
    Bench(BenchArgs),
    /// Score candidate strings by causal log-probability.
    Score(ScoreArgs),
    /// Print the patch segmentation of some text.
    PatchInspect(PatchInspectArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Write full-precision optimizer state here for later resumption.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
    /// Resume from a state file written by `--state-out`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Engine selection shared by `generate` and the sweep parser.
#[derive(Args, Debug, Clone, Default)]
pub struct EngineArgs {
    /// ar, blt-d, blt-s or blt-dv.
    #[arg(long, default_value = "ar")]
    pub engine: String,
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Draft window of blt-s.
    #[arg(long)]
    pub window: Option<usize>,
    /// confidence, eb or one-step.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    /// Sampling temperature of the eb strategy; 1 when only --top-p is given.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    /// Prompt text with backslash escapes.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    /// Raw prompt bytes.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the decode trace as one JSON line.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Print output as lowercase hex instead of raw bytes.
    #[arg(long)]
    pub hex: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    pub checkpoint: PathBuf,
    /// One escaped prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    /// One engine configuration per line, e.g. `engine=blt-d block=16 strategy=confidence alpha=0.5`.
    #[arg(long)]
    pub sweep: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Storage bytes per parameter in the bandwidth estimate.
    #[arg(long, default_value_t = 2)]
    pub bytes_per_param: u8,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreArgs {
    pub checkpoint: PathBuf,
    /// One escaped candidate per line.
    pub candidates: PathBuf,
}

#[derive(Args)]
pub struct PatchInspectArgs {
    /// Take the patcher from this checkpoint.
    #[arg(long, required_unless_present = "corpus")]
    pub checkpoint: Option<PathBuf>,
    /// Or fit a fresh patcher on this corpus.
    #[arg(long, conflicts_with = "checkpoint")]
    pub corpus: Option<PathBuf>,
    /// Config file for the patcher settings used with --corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Text with backslash escapes.
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    pub text: Option<String>,
    /// Raw bytes to segment.
    #[arg(long)]
    pub file: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Score(a) => commands::score(&a),
        Command::PatchInspect(a) => commands::patch_inspect(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
