//! `phonex`: score, decode, train and analyze phone recognizers.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod ablate;
mod correlate;
mod decode;
mod io;
mod score;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::io::Failure;

#[derive(Parser)]
#[command(
    name = "phonex",
    version,
    about = "Phone recognition scoring, decoding and CTC objective experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score hypotheses against references (PFER, PER, per-feature errors).
    Score(score::ScoreArgs),
    /// Per-feature error proportions only.
    Features(score::FeaturesArgs),
    /// Decode posterior grids into a hypothesis TSV.
    Decode(decode::DecodeArgs),
    /// Train the toy model with one objective.
    Train(ablate::TrainArgs),
    /// Train the toy model under several objectives and compare them.
    Ablate(ablate::AblateArgs),
    /// Rank-correlate per-language PFER with similarity-weighted training coverage.
    Correlate(correlate::CorrelateArgs),
}

#[derive(Args, Clone)]
pub struct TableArg {
    /// Articulatory feature table (CSV).
    #[arg(long, env = "PHONEX_FEATURE_TABLE", value_name = "CSV")]
    pub table: PathBuf,
}

#[derive(Args, Clone)]
pub struct OutputArgs {
    /// Write the report here instead of standard output.
    #[arg(long, short, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Tsv,
}

#[derive(Args, Clone)]
pub struct JobsArg {
    /// Worker threads for per-utterance work (0 = all cores).
    #[arg(long, short, default_value_t = 1)]
    pub jobs: usize,
}

impl JobsArg {
    pub fn pool(&self) -> Result<rayon::ThreadPool, Failure> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Failure::usage(anyhow::anyhow!("cannot start {} worker threads: {e}", self.jobs)))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Score(a) => score::run_score(a),
        Command::Features(a) => score::run_features(a),
        Command::Decode(a) => decode::run(a),
        Command::Train(a) => ablate::run_train(a),
        Command::Ablate(a) => ablate::run_ablate(a),
        Command::Correlate(a) => correlate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
