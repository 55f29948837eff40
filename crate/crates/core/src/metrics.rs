//! Alignment-based evaluation: PER, PFER and per-feature error attribution.
//!
//! Substitutions cost 1 under PER and the articulatory feature distance under
//! PFER; insertions and deletions cost 1 under both, so PFER never exceeds PER.
//! Rates are percentages normalized by reference length and aggregated as
//! micro-averages (total cost over total reference phones).

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipa::{feature_distance, FeatureTable, FeatureTableError, Phone, PhoneSequence};

/// Group name for utterances whose language or family cannot be resolved.
pub const UNKNOWN_GROUP: &str = "UNK";
/// Group name covering every utterance.
pub const ALL_GROUP: &str = "ALL";

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Table(#[from] FeatureTableError),
    #[error("reference is empty; error rate is undefined")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostModel {
    Per,
    Pfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Substitute,
    Insert,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub op: EditOp,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
    pub ref_phone: Option<String>,
    pub hyp_phone: Option<String>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub cost_model: CostModel,
    pub steps: Vec<AlignStep>,
    /// DP-optimal distance; equals the sum of step costs.
    pub distance: f64,
}

impl Alignment {
    pub fn count(&self, op: EditOp) -> usize {
        self.steps.iter().filter(|s| s.op == op).count()
    }
}

fn substitution_cost(a: &Phone, b: &Phone, model: CostModel) -> Result<f64, MetricError> {
    if a.text == b.text {
        return Ok(0.0);
    }
    match model {
        CostModel::Per => Ok(1.0),
        CostModel::Pfer => Ok(feature_distance(&a.features, &b.features)?),
    }
}

/// Levenshtein alignment of `hyp` against `reference`.
///
/// Backtrace prefers match, then substitute, then delete, then insert, so
/// the returned path is deterministic among co-optimal ones.
pub fn align(reference: &[Phone], hyp: &[Phone], cost_model: CostModel) -> Result<Alignment, MetricError> {
    let n = reference.len();
    let m = hyp.len();
    let width = m + 1;
    let mut sub = vec![0.0; n * m];
    for (i, r) in reference.iter().enumerate() {
        for (j, h) in hyp.iter().enumerate() {
            sub[i * m + j] = substitution_cost(r, h, cost_model)?;
        }
    }

    let mut dist = vec![0.0f64; (n + 1) * width];
    for (j, d) in dist.iter_mut().enumerate().take(m + 1) {
        *d = j as f64;
    }
    for i in 1..=n {
        dist[i * width] = i as f64;
        for j in 1..=m {
            let diag = dist[(i - 1) * width + j - 1] + sub[(i - 1) * m + j - 1];
            let up = dist[(i - 1) * width + j] + 1.0;
            let left = dist[i * width + j - 1] + 1.0;
            dist[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i * width + j];
        if i > 0 && j > 0 {
            let c = sub[(i - 1) * m + j - 1];
            if here == dist[(i - 1) * width + j - 1] + c {
                let same = reference[i - 1].text == hyp[j - 1].text;
                steps.push(AlignStep {
                    op: if same { EditOp::Match } else { EditOp::Substitute },
                    ref_index: Some(i - 1),
                    hyp_index: Some(j - 1),
                    ref_phone: Some(reference[i - 1].text.clone()),
                    hyp_phone: Some(hyp[j - 1].text.clone()),
                    cost: c,
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dist[(i - 1) * width + j] + 1.0 {
            steps.push(AlignStep {
                op: EditOp::Delete,
                ref_index: Some(i - 1),
                hyp_index: None,
                ref_phone: Some(reference[i - 1].text.clone()),
                hyp_phone: None,
                cost: 1.0,
            });
            i -= 1;
            continue;
        }
        debug_assert!(j > 0 && here == dist[i * width + j - 1] + 1.0);
        steps.push(AlignStep {
            op: EditOp::Insert,
            ref_index: None,
            hyp_index: Some(j - 1),
            ref_phone: None,
            hyp_phone: Some(hyp[j - 1].text.clone()),
            cost: 1.0,
        });
        j -= 1;
    }
    steps.reverse();

    Ok(Alignment {
        cost_model,
        steps,
        distance: dist[n * width + m],
    })
}

fn rate(reference: &PhoneSequence, hyp: &PhoneSequence, model: CostModel) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let a = align(&reference.phones, &hyp.phones, model)?;
    Ok(100.0 * a.distance / reference.len() as f64)
}

/// Phone feature error rate in percent, normalized by reference length.
pub fn pfer(reference: &PhoneSequence, hyp: &PhoneSequence) -> Result<f64, MetricError> {
    rate(reference, hyp, CostModel::Pfer)
}

/// Phone error rate in percent, normalized by reference length.
pub fn per(reference: &PhoneSequence, hyp: &PhoneSequence) -> Result<f64, MetricError> {
    rate(reference, hyp, CostModel::Per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub utterance_id: String,
    pub language: String,
    pub ref_length: usize,
    pub hyp_length: usize,
    pub pfer_cost: f64,
    pub per_cost: f64,
    /// `None` when the reference is empty.
    pub pfer: Option<f64>,
    pub per: Option<f64>,
}

/// Scores one utterance and returns the PFER alignment used for feature attribution.
pub fn score_utterance(
    reference: &PhoneSequence,
    hyp: &PhoneSequence,
) -> Result<(UtteranceScore, Alignment), MetricError> {
    let pfer_alignment = align(&reference.phones, &hyp.phones, CostModel::Pfer)?;
    let per_alignment = align(&reference.phones, &hyp.phones, CostModel::Per)?;
    let n = reference.len();
    let pct = |cost: f64| (n > 0).then(|| 100.0 * cost / n as f64);
    let score = UtteranceScore {
        utterance_id: reference.utterance_id.clone(),
        language: reference.language.clone(),
        ref_length: n,
        hyp_length: hyp.len(),
        pfer_cost: pfer_alignment.distance,
        per_cost: per_alignment.distance,
        pfer: pct(pfer_alignment.distance),
        per: pct(per_alignment.distance),
    };
    Ok((score, pfer_alignment))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureErrorCount {
    pub errors: u64,
    pub specified: u64,
}

impl FeatureErrorCount {
    pub fn proportion(&self) -> f64 {
        if self.specified == 0 {
            0.0
        } else {
            self.errors as f64 / self.specified as f64
        }
    }
}

/// Per-feature disagreement counts over aligned steps.
///
/// A step counts toward feature `f` when `f` is specified on the reference
/// phone (on the hypothesis phone for insertions). It counts as an error when
/// the other side disagrees, and always for insertions and deletions.
pub fn feature_error_counts(alignments: &[Alignment], table: &FeatureTable) -> IndexMap<String, FeatureErrorCount> {
    let k = table.num_features();
    let mut errors = vec![0u64; k];
    let mut specified = vec![0u64; k];
    for alignment in alignments {
        for step in &alignment.steps {
            let r = step.ref_phone.as_deref().map(|t| table.resolve(t).features);
            let h = step.hyp_phone.as_deref().map(|t| table.resolve(t).features);
            match (r, h) {
                (Some(r), Some(h)) => {
                    for f in 0..k {
                        if r.0[f].is_specified() {
                            specified[f] += 1;
                            if r.0[f] != h.0[f] {
                                errors[f] += 1;
                            }
                        }
                    }
                }
                (Some(present), None) | (None, Some(present)) => {
                    for f in 0..k {
                        if present.0[f].is_specified() {
                            specified[f] += 1;
                            errors[f] += 1;
                        }
                    }
                }
                (None, None) => {}
            }
        }
    }
    table
        .feature_names()
        .iter()
        .enumerate()
        .map(|(f, name)| {
            (
                name.clone(),
                FeatureErrorCount {
                    errors: errors[f],
                    specified: specified[f],
                },
            )
        })
        .collect()
}

/// Proportion of errors for each feature, in table order. Empty input gives an empty map.
pub fn feature_error_attribution(alignments: &[Alignment], table: &FeatureTable) -> IndexMap<String, f64> {
    if alignments.is_empty() {
        return IndexMap::new();
    }
    feature_error_counts(alignments, table)
        .into_iter()
        .map(|(name, c)| (name, c.proportion()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    All,
    Language,
    Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub utterances: usize,
    pub ref_phones: usize,
    pub pfer_cost: f64,
    pub per_cost: f64,
    /// `None` when the group has no reference phones.
    pub pfer: Option<f64>,
    pub per: Option<f64>,
}

fn group_key(score: &UtteranceScore, grouping: Grouping, family_map: &BTreeMap<String, String>) -> String {
    match grouping {
        Grouping::All => ALL_GROUP.to_string(),
        Grouping::Language if score.language.is_empty() => UNKNOWN_GROUP.to_string(),
        Grouping::Language => score.language.clone(),
        Grouping::Family => family_map
            .get(&score.language)
            .cloned()
            .unwrap_or_else(|| UNKNOWN_GROUP.to_string()),
    }
}

/// Micro-averaged PFER and PER per group.
///
/// Scores are summed in utterance-id order, so the result does not depend on
/// the order of `scores`.
pub fn aggregate(
    scores: &[UtteranceScore],
    grouping: Grouping,
    family_map: &BTreeMap<String, String>,
) -> BTreeMap<String, GroupMetrics> {
    let mut ordered: Vec<&UtteranceScore> = scores.iter().collect();
    ordered.sort_by(|a, b| {
        (&a.utterance_id, &a.language, a.ref_length, a.hyp_length)
            .cmp(&(&b.utterance_id, &b.language, b.ref_length, b.hyp_length))
            .then(a.pfer_cost.total_cmp(&b.pfer_cost))
            .then(a.per_cost.total_cmp(&b.per_cost))
    });

    let mut groups: BTreeMap<String, GroupMetrics> = BTreeMap::new();
    for score in ordered {
        let g = groups
            .entry(group_key(score, grouping, family_map))
            .or_insert(GroupMetrics {
                utterances: 0,
                ref_phones: 0,
                pfer_cost: 0.0,
                per_cost: 0.0,
                pfer: None,
                per: None,
            });
        g.utterances += 1;
        g.ref_phones += score.ref_length;
        g.pfer_cost += score.pfer_cost;
        g.per_cost += score.per_cost;
    }
    for g in groups.values_mut() {
        if g.ref_phones > 0 {
            g.pfer = Some(100.0 * g.pfer_cost / g.ref_phones as f64);
            g.per = Some(100.0 * g.per_cost / g.ref_phones as f64);
        }
    }
    groups
}

/// Corpus-level scoring output.
///
/// `aggregates` is keyed `ALL`, `lang:<code>` and, when a family map is
/// supplied, `family:<name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_utterance: Vec<UtteranceScore>,
    pub aggregates: BTreeMap<String, GroupMetrics>,
    pub feature_errors: IndexMap<String, f64>,
    /// Reference ids with no hypothesis line (scored as all deletions).
    #[serde(default)]
    pub missing_hypotheses: Vec<String>,
    /// Hypothesis ids with no reference line (not scored).
    #[serde(default)]
    pub unmatched_hypotheses: Vec<String>,
}

impl ScoreReport {
    pub fn build(
        mut per_utterance: Vec<UtteranceScore>,
        alignments: &[Alignment],
        table: &FeatureTable,
        family_map: Option<&BTreeMap<String, String>>,
    ) -> Self {
        per_utterance.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        let empty = BTreeMap::new();
        let mut aggregates = aggregate(&per_utterance, Grouping::All, &empty);
        for (lang, m) in aggregate(&per_utterance, Grouping::Language, &empty) {
            aggregates.insert(format!("lang:{lang}"), m);
        }
        if let Some(families) = family_map {
            for (family, m) in aggregate(&per_utterance, Grouping::Family, families) {
                aggregates.insert(format!("family:{family}"), m);
            }
        }
        ScoreReport {
            per_utterance,
            aggregates,
            feature_errors: feature_error_attribution(alignments, table),
            missing_hypotheses: Vec::new(),
            unmatched_hypotheses: Vec::new(),
        }
    }

    pub fn overall(&self) -> Option<&GroupMetrics> {
        self.aggregates.get(ALL_GROUP)
    }

    /// Per-language PFER, keyed by language code.
    pub fn language_pfer(&self) -> BTreeMap<String, f64> {
        self.aggregates
            .iter()
            .filter_map(|(k, m)| Some((k.strip_prefix("lang:")?.to_string(), m.pfer?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipa::{FeatureValue, FeatureVector};

    fn phone(text: &str, values: &[i8]) -> Phone {
        Phone {
            text: text.into(),
            features: FeatureVector(values.iter().map(|&v| FeatureValue::try_from(v).unwrap()).collect()),
            unknown: false,
        }
    }

    fn seq(phones: &[Phone]) -> PhoneSequence {
        PhoneSequence {
            utterance_id: "u".into(),
            language: "xxx".into(),
            phones: phones.to_vec(),
        }
    }

    #[test]
    fn identical_sequences_align_with_matches() {
        let p = phone("p", &[1, -1]);
        let a = phone("a", &[-1, 1]);
        let al = align(&[p.clone(), a.clone()], &[p, a], CostModel::Pfer).unwrap();
        assert_eq!(al.distance, 0.0);
        assert_eq!(al.count(EditOp::Match), 2);
    }

    #[test]
    fn classic_substitution() {
        let [a, b, c, d] = ["a", "b", "c", "d"].map(|t| phone(t, &[0]));
        let al = align(&[a.clone(), b.clone(), c], &[a, b, d], CostModel::Per).unwrap();
        assert_eq!(al.distance, 1.0);
        let subs: Vec<_> = al.steps.iter().filter(|s| s.op == EditOp::Substitute).collect();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].ref_index, Some(2));
    }

    #[test]
    fn cheap_substitution_beats_indel_pair() {
        let x = phone("x", &[1, 1, 1, 1]);
        let y = phone("y", &[1, 1, 1, -1]);
        let al = align(&[x], &[y], CostModel::Pfer).unwrap();
        assert_eq!(al.distance, 0.25);
        assert_eq!(al.steps.len(), 1);
        assert_eq!(al.steps[0].op, EditOp::Substitute);
    }

    #[test]
    fn pfer_examples() {
        let x = phone("x", &[1, 1]);
        let y = phone("y", &[1, -1]);
        let z = phone("z", &[1, 1]);
        let z = Phone {
            features: FeatureVector(vec![FeatureValue::Minus, FeatureValue::Minus]),
            ..z
        };
        assert_eq!(
            pfer(&seq(&[x.clone(), y.clone()]), &seq(&[x.clone(), z])).unwrap(),
            25.0
        );
        let r = seq(&[x.clone(), y.clone(), x.clone(), y.clone()]);
        assert_eq!(pfer(&r, &seq(&[])).unwrap(), 100.0);
        assert_eq!(pfer(&r, &r).unwrap(), 0.0);
        assert!(matches!(pfer(&seq(&[]), &r), Err(MetricError::EmptyReference)));
    }

    #[test]
    fn per_example() {
        let [a, b, c, d] = ["a", "b", "c", "d"].map(|t| phone(t, &[0]));
        let r = per(&seq(&[a.clone(), b.clone(), c]), &seq(&[a, b, d])).unwrap();
        assert!((r - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn tie_break_prefers_substitution_at_the_end() {
        let a = phone("a", &[1]);
        let b = phone("b", &[-1]);
        let al = align(&[a.clone(), a.clone()], &[b], CostModel::Per).unwrap();
        assert_eq!(al.distance, 2.0);
        // The trailing `a` is matched to `b` by substitution; the first is deleted.
        assert_eq!(al.steps[0].op, EditOp::Delete);
        assert_eq!(al.steps[1].op, EditOp::Substitute);
    }

    #[test]
    fn mismatched_tables_error() {
        let a = phone("a", &[1]);
        let b = phone("b", &[1, 1]);
        assert!(matches!(align(&[a], &[b], CostModel::Pfer), Err(MetricError::Table(_))));
    }

    #[test]
    fn attribution_single_lateral_substitution() {
        let table = FeatureTable::parse_csv("phone,lat,cor\nl,+,+\nn,-,+\n").unwrap();
        let l = table.resolve("l");
        let n = table.resolve("n");
        let al = align(&[l], &[n], CostModel::Pfer).unwrap();
        let fe = feature_error_attribution(&[al], &table);
        assert_eq!(fe["lat"], 1.0);
        assert_eq!(fe["cor"], 0.0);
        assert_eq!(fe.keys().collect::<Vec<_>>(), ["lat", "cor"]);
    }

    #[test]
    fn attribution_all_matches_and_empty() {
        let table = FeatureTable::default_table();
        assert!(feature_error_attribution(&[], &table).is_empty());
        let s = crate::ipa::segment("pata", &table);
        let al = align(&s.phones, &s.phones, CostModel::Pfer).unwrap();
        let fe = feature_error_attribution(&[al], &table);
        assert_eq!(fe.len(), table.num_features());
        assert!(fe.values().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_micro_average() {
        let mk = |id: &str, lang: &str, cost: f64, n: usize| UtteranceScore {
            utterance_id: id.into(),
            language: lang.into(),
            ref_length: n,
            hyp_length: n,
            pfer_cost: cost,
            per_cost: cost,
            pfer: Some(100.0 * cost / n as f64),
            per: Some(100.0 * cost / n as f64),
        };
        let scores = vec![mk("a", "eng", 1.0, 2), mk("b", "eng", 3.0, 2)];
        let all = aggregate(&scores, Grouping::All, &BTreeMap::new());
        assert_eq!(all[ALL_GROUP].pfer, Some(100.0));
        let one = aggregate(&scores[..1], Grouping::All, &BTreeMap::new());
        assert_eq!(one[ALL_GROUP].pfer, scores[0].pfer);
        let fams = aggregate(&scores, Grouping::Family, &BTreeMap::new());
        assert_eq!(fams.keys().collect::<Vec<_>>(), [UNKNOWN_GROUP]);
    }
}
