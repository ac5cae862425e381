mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvad_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "mvad",
    version,
    about = "Text-guided multimodal video anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Deterministic offline backend.
    Mock,
    /// Chat-completion endpoint from MVAD_LLM_ENDPOINT, MVAD_LLM_API_KEY and MVAD_LLM_MODEL.
    Remote,
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a planted anomaly.
    Synth(commands::SynthArgs),
    /// Summarize each training video's captions into one labelled sentence.
    MstaSummarize(commands::SummarizeArgs),
    /// Score every training caption in context of the summaries.
    MstaAnnotate(commands::AnnotateArgs),
    /// Generate new anomalous captions from the annotated pool.
    MstaGenerate(commands::GenerateArgs),
    /// Fit the text anomaly head on labelled captions.
    TrainTextHead(commands::TrainTextHeadArgs),
    /// Train the multimodal detector on the training split.
    Train(commands::TrainArgs),
    /// Write per-snippet scores for one split as CSV.
    Score(commands::ScoreArgs),
    /// Frame-level AUC and AP of a score CSV against the frame labels.
    Eval(commands::EvalArgs),
}

/// Process exit status for each error category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Feature { .. }
        | Error::Decode { .. }
        | Error::Alignment(_)
        | Error::Contract(_) => 4,
        Error::Backend { .. } => 5,
        Error::Numeric(_) | Error::MetricUndefined(_) | Error::Tensor(_) => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::MstaSummarize(a) => commands::summarize(&a),
        Command::MstaAnnotate(a) => commands::annotate(&a),
        Command::MstaGenerate(a) => commands::generate(&a),
        Command::TrainTextHead(a) => commands::train_text_head(&a),
        Command::Train(a) => commands::train(&a),
        Command::Score(a) => commands::score(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
