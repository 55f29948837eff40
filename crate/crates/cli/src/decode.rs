use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use phonex_core::decode::{beam_decode, greedy_decode, render};
use phonex_core::formats::{write_transcripts, PosteriorFile, TranscriptLine};
use rayon::prelude::*;

use crate::io::{emit, load_table, parse_file, require_files, CliResult, Failure};
use crate::{JobsArg, TableArg};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Beam,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Posterior grids (JSON).
    #[arg(long, value_name = "JSON")]
    pub posteriors: PathBuf,
    #[command(flatten)]
    pub table: TableArg,
    #[arg(long, value_enum, default_value_t = Mode::Greedy)]
    pub mode: Mode,
    /// Prefix beam width for `--mode beam`.
    #[arg(long, default_value_t = 8)]
    pub beam_width: usize,
    /// Hypothesis TSV; standard output when absent.
    #[arg(long, short, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub jobs: JobsArg,
}

pub fn run(args: DecodeArgs) -> CliResult {
    if args.mode == Mode::Beam && args.beam_width == 0 {
        return Err(Failure::usage(anyhow!("--beam-width must be at least 1")));
    }
    require_files([&args.posteriors, &args.table.table])?;
    let table = load_table(&args.table.table)?;
    let file = parse_file(&args.posteriors, PosteriorFile::parse)?;
    let grids = file.grids().map_err(Failure::data)?;

    let unknown: Vec<&str> = file.symbols[1..]
        .iter()
        .filter(|s| !table.contains(s))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        eprintln!("warning: symbols not in the feature table: {}", unknown.join(" "));
    }

    let mut lines: Vec<TranscriptLine> = args.jobs.pool()?.install(|| {
        file.utterances
            .par_iter()
            .zip(grids.par_iter())
            .map(|(u, grid)| {
                let labels = match args.mode {
                    Mode::Greedy => greedy_decode(grid).labels,
                    Mode::Beam => beam_decode(grid, args.beam_width)
                        .into_iter()
                        .next()
                        .map(|h| h.labels)
                        .unwrap_or_default(),
                };
                TranscriptLine {
                    utt_id: u.utt_id.clone(),
                    lang: u.lang.clone(),
                    ipa: render(&labels, &file.symbols),
                }
            })
            .collect()
    });
    lines.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    if let Some(w) = lines.windows(2).find(|w| w[0].utt_id == w[1].utt_id) {
        return Err(Failure::data(anyhow!("duplicate utterance id {:?}", w[0].utt_id)));
    }

    let header = match args.mode {
        Mode::Greedy => "# decode mode=greedy\n".to_string(),
        Mode::Beam => format!("# decode mode=beam beam_width={}\n", args.beam_width),
    };
    emit(args.out.as_deref(), &(header + &write_transcripts(&lines)))
}
