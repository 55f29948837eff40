use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use indexmap::IndexMap;
use phonex_core::formats::{parse_family_map, parse_transcripts, TranscriptLine};
use phonex_core::ipa::segment;
use phonex_core::metrics::{feature_error_counts, score_utterance, UtteranceScore, ALL_GROUP};
use phonex_core::{Alignment, FeatureTable, PhoneSequence, ScoreReport};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{emit, load_table, num, parse_file, pct, require_files, to_json, CliResult, Failure};
use crate::{Format, JobsArg, OutputArgs, TableArg};

#[derive(Args)]
pub struct ScoreArgs {
    /// Reference transcripts: utt_id<TAB>lang<TAB>ipa.
    #[arg(long = "ref", value_name = "TSV")]
    pub reference: PathBuf,
    /// Hypothesis transcripts in the same format.
    #[arg(long, value_name = "TSV")]
    pub hyp: PathBuf,
    #[command(flatten)]
    pub table: TableArg,
    /// Language to family map: lang<TAB>family.
    #[arg(long, value_name = "TSV")]
    pub family_map: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

#[derive(Args)]
pub struct FeaturesArgs {
    #[arg(long = "ref", value_name = "TSV")]
    pub reference: PathBuf,
    #[arg(long, value_name = "TSV")]
    pub hyp: PathBuf,
    #[command(flatten)]
    pub table: TableArg,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

struct Scored {
    report: ScoreReport,
    alignments: Vec<Alignment>,
    unknown_phones: usize,
}

fn sequence(line: &TranscriptLine, lang: &str, table: &FeatureTable) -> PhoneSequence {
    PhoneSequence {
        utterance_id: line.utt_id.clone(),
        language: lang.to_string(),
        ..segment(&line.ipa, table)
    }
}

fn score_files(
    reference: &Path,
    hyp: &Path,
    table: &FeatureTable,
    family_map: Option<&BTreeMap<String, String>>,
    jobs: &JobsArg,
) -> CliResult<Scored> {
    let refs = parse_file(reference, parse_transcripts)?;
    let hyps = parse_file(hyp, parse_transcripts)?;
    let hyp_by_id: HashMap<&str, &TranscriptLine> = hyps.iter().map(|h| (h.utt_id.as_str(), h)).collect();
    let ref_ids: BTreeSet<&str> = refs.iter().map(|r| r.utt_id.as_str()).collect();

    let results: Vec<_> = jobs.pool()?.install(|| {
        refs.par_iter()
            .map(|r| {
                let reference = sequence(r, &r.lang, table);
                let hypothesis = match hyp_by_id.get(r.utt_id.as_str()) {
                    Some(h) => sequence(h, &r.lang, table),
                    None => PhoneSequence {
                        utterance_id: r.utt_id.clone(),
                        language: r.lang.clone(),
                        phones: Vec::new(),
                    },
                };
                let unknown = reference.unknown_positions().len() + hypothesis.unknown_positions().len();
                score_utterance(&reference, &hypothesis)
                    .map(|(score, alignment)| (score, alignment, unknown))
                    .with_context(|| format!("utterance {}", r.utt_id))
            })
            .collect()
    });
    let mut rows: Vec<(UtteranceScore, Alignment, usize)> =
        results.into_iter().collect::<Result<_, _>>().map_err(Failure::data)?;
    rows.sort_by(|a, b| a.0.utterance_id.cmp(&b.0.utterance_id));

    let unknown_phones = rows.iter().map(|r| r.2).sum();
    let (scores, alignments): (Vec<_>, Vec<_>) = rows.into_iter().map(|(s, a, _)| (s, a)).unzip();
    let mut report = ScoreReport::build(scores, &alignments, table, family_map);
    report.missing_hypotheses = ref_ids
        .iter()
        .filter(|id| !hyp_by_id.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    let mut unmatched: Vec<String> = hyps
        .iter()
        .filter(|h| !ref_ids.contains(h.utt_id.as_str()))
        .map(|h| h.utt_id.clone())
        .collect();
    unmatched.sort();
    report.unmatched_hypotheses = unmatched;
    Ok(Scored {
        report,
        alignments,
        unknown_phones,
    })
}

fn warn(scored: &Scored) {
    if scored.unknown_phones > 0 {
        eprintln!(
            "warning: {} phone(s) not in the feature table; scored with all features unspecified",
            scored.unknown_phones
        );
    }
    let r = &scored.report;
    if !r.missing_hypotheses.is_empty() {
        eprintln!(
            "warning: {} reference utterance(s) have no hypothesis; scored as deletions",
            r.missing_hypotheses.len()
        );
    }
    if !r.unmatched_hypotheses.is_empty() {
        eprintln!(
            "warning: {} hypothesis utterance(s) have no reference; ignored",
            r.unmatched_hypotheses.len()
        );
    }
}

pub fn score_tsv(report: &ScoreReport) -> String {
    let mut out = String::from("group\tutterances\tref_phones\tpfer\tper\n");
    for (group, m) in &report.aggregates {
        out += &format!(
            "{group}\t{}\t{}\t{}\t{}\n",
            m.utterances,
            m.ref_phones,
            pct(m.pfer),
            pct(m.per)
        );
    }
    out += "\nutt_id\tlang\tref_len\thyp_len\tpfer\tper\n";
    for u in &report.per_utterance {
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            u.utterance_id,
            u.language,
            u.ref_length,
            u.hyp_length,
            pct(u.pfer),
            pct(u.per)
        );
    }
    out += "\nfeature\tproportion\n";
    for (name, p) in &report.feature_errors {
        out += &format!("{name}\t{}\n", num(*p));
    }
    out
}

pub fn run_score(args: ScoreArgs) -> CliResult {
    let mut inputs = vec![&args.reference, &args.hyp, &args.table.table];
    inputs.extend(args.family_map.as_ref());
    require_files(inputs)?;
    let table = load_table(&args.table.table)?;
    let families = args
        .family_map
        .as_ref()
        .map(|p| parse_file(p, parse_family_map))
        .transpose()?;

    let scored = score_files(&args.reference, &args.hyp, &table, families.as_ref(), &args.jobs)?;
    warn(&scored);
    let report = &scored.report;
    let body = match args.output.format {
        Format::Json => to_json(report),
        Format::Tsv => score_tsv(report),
    };
    emit(args.output.out.as_deref(), &body)?;

    let summary = match report.overall() {
        Some(all) => format!("{ALL_GROUP}\tPFER {}\tPER {}", pct(all.pfer), pct(all.per)),
        None => format!("{ALL_GROUP}\tno utterances"),
    };
    if args.output.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

#[derive(Serialize)]
struct FeatureRow {
    errors: u64,
    specified: u64,
    proportion: f64,
}

#[derive(Serialize)]
struct FeatureReport {
    table_version: String,
    utterances: usize,
    features: IndexMap<String, FeatureRow>,
}

pub fn run_features(args: FeaturesArgs) -> CliResult {
    require_files([&args.reference, &args.hyp, &args.table.table])?;
    let table = load_table(&args.table.table)?;
    let scored = score_files(&args.reference, &args.hyp, &table, None, &args.jobs)?;
    warn(&scored);
    let features = if scored.alignments.is_empty() {
        IndexMap::new()
    } else {
        feature_error_counts(&scored.alignments, &table)
            .into_iter()
            .map(|(name, c)| {
                let row = FeatureRow {
                    errors: c.errors,
                    specified: c.specified,
                    proportion: c.proportion(),
                };
                (name, row)
            })
            .collect()
    };
    let report = FeatureReport {
        table_version: table.version().to_string(),
        utterances: scored.alignments.len(),
        features,
    };
    let body = match args.output.format {
        Format::Json => to_json(&report),
        Format::Tsv => {
            let mut out = String::from("feature\terrors\tspecified\tproportion\n");
            for (name, r) in &report.features {
                out += &format!("{name}\t{}\t{}\t{}\n", r.errors, r.specified, num(r.proportion));
            }
            out
        }
    };
    emit(args.output.out.as_deref(), &body)
}
