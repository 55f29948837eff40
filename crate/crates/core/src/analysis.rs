//! Cross-lingual analysis: similarity-weighted training coverage of test
//! languages and its rank correlation with per-language error rates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::{aggregate, Grouping, UtteranceScore};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 paired observations, got {0}")]
    TooFewObservations(usize),
    #[error("input is constant; rank correlation is undefined")]
    ConstantInput,
    #[error("non-finite value in input")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangVector {
    pub lang: String,
    pub values: Vec<f64>,
}

/// Builds complete vectors from rows with missing cells, imputing each
/// missing entry with the mean of that feature over the languages that have
/// it (0 when no language has it).
pub fn impute_missing(rows: Vec<(String, Vec<Option<f64>>)>) -> Result<Vec<LangVector>, AnalysisError> {
    let width = rows.first().map_or(0, |r| r.1.len());
    if let Some(bad) = rows.iter().find(|r| r.1.len() != width) {
        return Err(AnalysisError::LengthMismatch(width, bad.1.len()));
    }
    let means: Vec<f64> = (0..width)
        .map(|f| {
            let present: Vec<f64> = rows.iter().filter_map(|r| r.1[f]).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    Ok(rows
        .into_iter()
        .map(|(lang, cells)| LangVector {
            lang,
            values: cells.into_iter().zip(&means).map(|(c, m)| c.unwrap_or(*m)).collect(),
        })
        .collect())
}

/// Cosine similarity; 0 when either vector is all zeros.
pub fn similarity(a: &LangVector, b: &LangVector) -> Result<f64, AnalysisError> {
    if a.values.len() != b.values.len() {
        return Err(AnalysisError::LengthMismatch(a.values.len(), b.values.len()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageScore {
    pub lang: String,
    pub weighted_count: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scores: Vec<CoverageScore>,
    /// Training languages left out because they have no vector.
    pub missing_vectors: Vec<String>,
}

/// Similarity-weighted training utterance counts for each test language:
/// `sum_t max(0, sim(test, t)) * count_t`.
///
/// With `exclude_self`, a training language with the same code as the test
/// language does not contribute.
pub fn coverage(
    test_langs: &[LangVector],
    train_counts: &BTreeMap<String, f64>,
    train_vectors: &BTreeMap<String, LangVector>,
    exclude_self: bool,
) -> Result<CoverageReport, AnalysisError> {
    let mut report = CoverageReport::default();
    let mut usable = Vec::new();
    for (lang, &count) in train_counts {
        match train_vectors.get(lang) {
            Some(v) => usable.push((lang, count, v)),
            None => report.missing_vectors.push(lang.clone()),
        }
    }
    for test in test_langs {
        let mut weighted = 0.0;
        for &(lang, count, vector) in &usable {
            if exclude_self && *lang == test.lang {
                continue;
            }
            weighted += similarity(test, vector)?.max(0.0) * count;
        }
        report.scores.push(CoverageScore {
            lang: test.lang.clone(),
            weighted_count: weighted,
        });
    }
    Ok(report)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<(), AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(AnalysisError::TooFewObservations(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(AnalysisError::ConstantInput);
    }
    Ok(())
}

fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// p-value from the t approximation on `n - 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman, AnalysisError> {
    check_inputs(x, y)?;
    let rho = spearman_rho(x, y);
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Spearman { rho, p })
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Spearman's rho with a two-sided permutation p-value,
/// `(1 + #{|rho_perm| >= |rho|}) / (1 + permutations)`.
pub fn spearman_permutation(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<Spearman, AnalysisError> {
    check_inputs(x, y)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = ry.clone();
    let threshold = rho.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if pearson(&rx, &shuffled).abs() >= threshold {
            extreme += 1;
        }
    }
    Ok(Spearman {
        rho,
        p: (1 + extreme) as f64 / (1 + permutations) as f64,
    })
}

/// Micro-averaged PFER per language family; unmapped languages fall under `UNK`.
pub fn family_breakdown(scores: &[UtteranceScore], family_map: &BTreeMap<String, String>) -> BTreeMap<String, f64> {
    aggregate(scores, Grouping::Family, family_map)
        .into_iter()
        .filter_map(|(family, m)| Some((family, m.pfer?)))
        .collect()
}

/// Correlates per-language PFER with coverage over the languages that have
/// both a score and a vector.
pub fn correlate(
    language_pfer: &BTreeMap<String, f64>,
    vectors: &BTreeMap<String, LangVector>,
    train_counts: &BTreeMap<String, f64>,
    exclude_self: bool,
) -> Result<(CoverageReport, Spearman, Vec<String>), AnalysisError> {
    let tests: Vec<LangVector> = language_pfer.keys().filter_map(|l| vectors.get(l).cloned()).collect();
    let cov = coverage(&tests, train_counts, vectors, exclude_self)?;
    let langs: Vec<String> = cov.scores.iter().map(|c| c.lang.clone()).collect();
    let x: Vec<f64> = cov.scores.iter().map(|c| c.weighted_count).collect();
    let y: Vec<f64> = langs.iter().map(|l| language_pfer[l]).collect();
    let s = spearman(&x, &y)?;
    Ok((cov, s, langs))
}
