use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::anyhow;
use clap::Args;
use phonex_core::analysis::{correlate, family_breakdown, spearman_permutation, AnalysisError, CoverageScore};
use phonex_core::formats::{parse_counts, parse_family_map, parse_lang_vectors};
use phonex_core::ScoreReport;
use serde::Serialize;

use crate::io::{emit, num, parse_file, require_files, to_json, CliResult, Failure};

#[derive(Args)]
pub struct CorrelateArgs {
    /// Report written by `phonex score` (JSON).
    #[arg(long, value_name = "JSON")]
    pub scores: PathBuf,
    /// Phonological language vectors: lang,<f1>,...,<fK>.
    #[arg(long, value_name = "CSV")]
    pub vectors: PathBuf,
    /// Training utterance counts: lang<TAB>count.
    #[arg(long, value_name = "TSV")]
    pub counts: PathBuf,
    /// Leave a test language's own training data out of its coverage (default).
    #[arg(long, overrides_with = "include_self")]
    pub exclude_self: bool,
    /// Count a test language's own training data toward its coverage.
    #[arg(long, overrides_with = "exclude_self")]
    pub include_self: bool,
    /// Language to family map for the per-family breakdown.
    #[arg(long, value_name = "TSV")]
    pub family_map: Option<PathBuf>,
    /// Compute p by permutation instead of the t approximation.
    #[arg(long, value_name = "N")]
    pub permutations: Option<usize>,
    /// Seed for the permutation test.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CorrelateReport {
    exclude_self: bool,
    coverage: Vec<CoverageScore>,
    missing_vectors: Vec<String>,
    languages: Vec<String>,
    pfer: Vec<f64>,
    rho: f64,
    p: f64,
    p_method: String,
    per_family: BTreeMap<String, f64>,
}

fn analysis_failure(e: AnalysisError) -> Failure {
    match e {
        AnalysisError::NonFinite => Failure::numerical(e),
        _ => Failure::data(e),
    }
}

pub fn run(args: CorrelateArgs) -> CliResult {
    let mut inputs = vec![&args.scores, &args.vectors, &args.counts];
    inputs.extend(args.family_map.as_ref());
    require_files(inputs)?;
    let report: ScoreReport = parse_file(&args.scores, |t| serde_json::from_str(t))?;
    let vectors = parse_file(&args.vectors, parse_lang_vectors)?;
    let counts = parse_file(&args.counts, parse_counts)?;
    let exclude_self = !args.include_self;

    let language_pfer = report.language_pfer();
    let scored_without_vector: Vec<&String> = language_pfer.keys().filter(|l| !vectors.contains_key(*l)).collect();
    if !scored_without_vector.is_empty() {
        eprintln!(
            "warning: no vector for scored language(s) {}; left out of the correlation",
            scored_without_vector
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    let (coverage, mut stats, languages) =
        correlate(&language_pfer, &vectors, &counts, exclude_self).map_err(analysis_failure)?;
    if !coverage.missing_vectors.is_empty() {
        eprintln!(
            "warning: training language(s) without vectors excluded from coverage: {}",
            coverage.missing_vectors.join(" ")
        );
    }
    let pfer: Vec<f64> = languages.iter().map(|l| language_pfer[l]).collect();
    let p_method = match args.permutations {
        Some(0) => return Err(Failure::usage(anyhow!("--permutations must be positive"))),
        Some(n) => {
            let x: Vec<f64> = coverage.scores.iter().map(|c| c.weighted_count).collect();
            stats = spearman_permutation(&x, &pfer, n, args.seed).map_err(analysis_failure)?;
            format!("permutation n={n} seed={}", args.seed)
        }
        None => "t-approximation".to_string(),
    };

    let per_family = match &args.family_map {
        Some(path) => family_breakdown(&report.per_utterance, &parse_file(path, parse_family_map)?),
        None => report
            .aggregates
            .iter()
            .filter_map(|(k, m)| Some((k.strip_prefix("family:")?.to_string(), m.pfer?)))
            .collect(),
    };

    let out = CorrelateReport {
        exclude_self,
        coverage: coverage.scores,
        missing_vectors: coverage.missing_vectors,
        languages,
        pfer,
        rho: stats.rho,
        p: stats.p,
        p_method,
        per_family,
    };
    emit(args.out.as_deref(), &to_json(&out))?;
    eprintln!(
        "rho {} p {} ({} languages)",
        num(out.rho),
        num(out.p),
        out.languages.len()
    );
    Ok(())
}
