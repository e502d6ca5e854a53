//! `itemdiff` command-line tool.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("{0}")]
    Data(String),
    #[error("{failed} of {total} items failed; see {}", sidecar.display())]
    Partial { failed: usize, total: usize, sidecar: PathBuf },
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    pub fn data(context: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {err}", context.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Config(_) => 2,
            CliError::Auth(_) => 3,
            CliError::Partial { .. } => 4,
        }
    }
}

const RESPONSES_FORMAT: &str = "\
Response table (CSV, UTF-8, header row required):
  item_id             item identifier
  image_url           chart image path (relative to the file) or http(s)/file URL
  question_text       question shown to respondents
  possible_responses  answer options joined by the options delimiter
  incorrect_response  1/0 or true/false; 1 means the answer was wrong
  participant_id      optional";

const ITEMS_FORMAT: &str = "\
Items table (CSV, UTF-8), as written by `aggregate`:
  item_id, difficulty, easiness, n_responses,
  image_url, question_text, possible_responses
difficulty is the share of incorrect responses; easiness = 1 - difficulty.";

const PREDICT_FORMAT: &str = "\
The items file needs item_id, image_url, question_text and possible_responses
columns; extra columns (such as those written by `aggregate`) are ignored.
Relative image paths resolve against the items file's directory.

Predictions table (CSV):
  item_id, kind (text|vision|multimodal), prediction (easiness in [0,1]),
  provenance (model|cache|fallback), model_id, prompt_version
Failed items are listed in <out>.failures.csv (index, item_id, error).
A run manifest is written to <out>.manifest.json.

The config file is TOML with optional sections [client], [model], [batch]
and [images]. The API key is read from the environment variable named by
client.api_key_env_var (default OPENAI_API_KEY), never from the file.

--offline-fixture takes a CSV with item_id and easiness (or difficulty)
columns and answers every request with the mock predictor instead of the
network.

Exit codes: 0 success, 1 data error, 2 configuration error,
3 authentication error, 4 some items failed.";

const EVALUATE_FORMAT: &str = "\
--preds takes prediction tables written by `predict`; repeat it to compare
pipelines. --truth takes a table with item_id and easiness (or difficulty).
Every predicted item must appear in the truth table.

Outputs:
  <out>                    report JSON (an object for one pipeline, an array
                           for several): kind, n_items, mae, mse,
                           sem_abs_error, histogram [{lo, hi, count}]
  <stem>.mae.csv           kind, mae, sem_abs_error, mse, rank, best
  <stem>.distribution.csv  kind, bin_lo, bin_hi, count
  <out>.manifest.json      run manifest";

#[derive(Debug, Parser)]
#[command(name = "itemdiff", version, about = "Predict and evaluate test item difficulty with chat-completion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Aggregate per-response records into per-item difficulty.
    #[command(after_long_help = joined(RESPONSES_FORMAT, ITEMS_FORMAT))]
    Aggregate(AggregateArgs),
    /// Split an items table into validation.csv and test.csv.
    #[command(after_long_help = ITEMS_FORMAT)]
    Split(SplitArgs),
    /// Keep only items whose image format is in the given list.
    #[command(after_long_help = ITEMS_FORMAT)]
    Filter(FilterArgs),
    /// Predict item easiness with one of the three pipelines.
    #[command(after_long_help = PREDICT_FORMAT)]
    Predict(PredictArgs),
    /// Score prediction tables against ground truth.
    #[command(after_long_help = EVALUATE_FORMAT)]
    Evaluate(EvaluateArgs),
    /// Write a two-column submission file (item_id, prediction) clamped to [0, 1].
    Submit(SubmitArgs),
    /// Generate synthetic responses from a Rasch model.
    #[command(after_long_help = RESPONSES_FORMAT)]
    Simulate(SimulateArgs),
}

fn joined(a: &'static str, b: &'static str) -> String {
    format!("{a}\n\n{b}")
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Separator between answer options inside possible_responses.
    #[arg(long, default_value = "|")]
    pub options_delimiter: String,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Share of items that go to the validation set.
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    /// Directory for validation.csv and test.csv (default: the input's directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "|")]
    pub options_delimiter: String,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated formats to keep, e.g. png,jpeg.
    #[arg(long, value_delimiter = ',', default_value = "png,jpeg")]
    pub formats: Vec<String>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "|")]
    pub options_delimiter: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Pipeline: text, vision or multimodal.
    #[arg(long)]
    pub mode: String,
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Answer requests from a truth table via the mock predictor.
    #[arg(long)]
    pub offline_fixture: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub fixture_noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    pub fixture_seed: u64,
    /// Rasterize SVG images instead of falling back.
    #[arg(long)]
    pub rasterize_svg: bool,
    #[arg(long)]
    pub fallback_value: Option<f64>,
    #[arg(long)]
    pub max_concurrency: Option<usize>,
    #[arg(long, default_value = "|")]
    pub options_delimiter: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required = true)]
    pub preds: Vec<PathBuf>,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct SubmitArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub items: usize,
    #[arg(long)]
    pub respondents: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Aggregate(a) => commands::aggregate(&a),
        Command::Split(a) => commands::split(&a),
        Command::Filter(a) => commands::filter(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Submit(a) => commands::submit(&a),
        Command::Simulate(a) => commands::simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
