//! IPA segmentation and articulatory feature tables.
//!
//! A [`FeatureTable`] maps IPA segments to ternary feature vectors. Strings are
//! segmented by greedy longest match against the table keys after NFD
//! normalization, so diacritics only attach to a base symbol when the table
//! lists the combination.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// The table bundled with the crate (22 panphon-style features).
pub const DEFAULT_TABLE_CSV: &str = include_str!("../data/features.csv");

#[derive(Debug, Error)]
pub enum FeatureTableError {
    #[error("failed to read feature table: {0}")]
    Io(#[from] std::io::Error),
    #[error("feature table is not valid UTF-8")]
    NotUtf8,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate phone {phone:?}")]
    DuplicateKey { line: usize, phone: String },
    #[error("line {line}: unknown feature value {value:?} (expected +, - or 0)")]
    Value { line: usize, value: String },
    #[error("feature vectors have different lengths ({left} vs {right})")]
    TableMismatch { left: usize, right: usize },
}

/// One ternary feature value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum FeatureValue {
    Plus,
    Minus,
    Unspecified,
}

impl FeatureValue {
    pub fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "+" => Some(Self::Plus),
            "-" => Some(Self::Minus),
            "0" => Some(Self::Unspecified),
            _ => None,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Self::Plus => '+',
            Self::Minus => '-',
            Self::Unspecified => '0',
        }
    }

    pub fn is_specified(self) -> bool {
        self != Self::Unspecified
    }
}

impl From<FeatureValue> for i8 {
    fn from(v: FeatureValue) -> i8 {
        match v {
            FeatureValue::Plus => 1,
            FeatureValue::Minus => -1,
            FeatureValue::Unspecified => 0,
        }
    }
}

impl TryFrom<i8> for FeatureValue {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Self::Plus),
            -1 => Ok(Self::Minus),
            0 => Ok(Self::Unspecified),
            other => Err(format!("feature value out of range: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<FeatureValue>);

impl FeatureVector {
    pub fn unspecified(len: usize) -> Self {
        FeatureVector(vec![FeatureValue::Unspecified; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[FeatureValue] {
        &self.0
    }
}

/// An IPA segment and its features.
///
/// Phones the table does not know carry an all-unspecified vector and
/// `unknown == true`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phone {
    pub text: String,
    pub features: FeatureVector,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unknown: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhoneSequence {
    pub utterance_id: String,
    pub language: String,
    pub phones: Vec<Phone>,
}

impl PhoneSequence {
    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    /// Positions of phones that did not resolve in the table.
    pub fn unknown_positions(&self) -> Vec<usize> {
        self.phones
            .iter()
            .enumerate()
            .filter(|(_, p)| p.unknown)
            .map(|(i, _)| i)
            .collect()
    }

    /// Phone texts joined by single spaces, which segments back to the same phones.
    pub fn to_ipa_string(&self) -> String {
        self.phones
            .iter()
            .map(|p| p.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    entries: HashMap<String, FeatureVector>,
    version: String,
    max_key_chars: usize,
}

impl FeatureTable {
    pub fn new(
        feature_names: Vec<String>,
        entries: impl IntoIterator<Item = (String, FeatureVector)>,
        version: impl Into<String>,
    ) -> Result<Self, FeatureTableError> {
        let mut table = FeatureTable {
            feature_names,
            entries: HashMap::new(),
            version: version.into(),
            max_key_chars: 0,
        };
        table.check_names(0)?;
        for (phone, vector) in entries {
            table.insert(phone, vector, 0)?;
        }
        Ok(table)
    }

    /// The table shipped in `data/features.csv`.
    pub fn default_table() -> Self {
        Self::parse_csv(DEFAULT_TABLE_CSV).expect("bundled feature table is valid")
    }

    /// Parses the CSV format: header `phone,<feat1>,...`, values in `{+,-,0}`,
    /// `#` comment lines. A comment of the form `# version: X` sets the version.
    pub fn parse_csv(text: &str) -> Result<Self, FeatureTableError> {
        let mut header: Option<Vec<String>> = None;
        let mut table: Option<FeatureTable> = None;
        let mut version = String::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            match (&header, &mut table) {
                (None, _) => {
                    if cells.first().copied() != Some("phone") {
                        return Err(FeatureTableError::Parse {
                            line: line_no,
                            message: "header must start with `phone`".into(),
                        });
                    }
                    let names: Vec<String> = cells[1..].iter().map(|s| s.to_string()).collect();
                    let t = FeatureTable {
                        feature_names: names.clone(),
                        entries: HashMap::new(),
                        version: String::new(),
                        max_key_chars: 0,
                    };
                    t.check_names(line_no)?;
                    header = Some(names);
                    table = Some(t);
                }
                (Some(names), Some(t)) => {
                    if cells.len() != names.len() + 1 {
                        return Err(FeatureTableError::Parse {
                            line: line_no,
                            message: format!("expected {} columns, found {}", names.len() + 1, cells.len()),
                        });
                    }
                    let values = cells[1..]
                        .iter()
                        .map(|c| {
                            FeatureValue::from_symbol(c).ok_or_else(|| FeatureTableError::Value {
                                line: line_no,
                                value: c.to_string(),
                            })
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    t.insert(cells[0].to_string(), FeatureVector(values), line_no)?;
                }
                (Some(_), None) => unreachable!("header and table are set together"),
            }
        }

        let mut table = table.ok_or(FeatureTableError::Parse {
            line: 0,
            message: "missing header".into(),
        })?;
        table.version = version;
        Ok(table)
    }

    fn check_names(&self, line: usize) -> Result<(), FeatureTableError> {
        let mut seen = std::collections::HashSet::new();
        for name in &self.feature_names {
            if name.is_empty() {
                return Err(FeatureTableError::Parse {
                    line,
                    message: "empty feature name".into(),
                });
            }
            if !seen.insert(name) {
                return Err(FeatureTableError::Parse {
                    line,
                    message: format!("duplicate feature name {name:?}"),
                });
            }
        }
        Ok(())
    }

    fn insert(&mut self, phone: String, vector: FeatureVector, line: usize) -> Result<(), FeatureTableError> {
        let key: String = phone.nfd().collect();
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(FeatureTableError::Parse {
                line,
                message: format!("invalid phone key {phone:?}"),
            });
        }
        if vector.len() != self.feature_names.len() {
            return Err(FeatureTableError::Parse {
                line,
                message: format!(
                    "expected {} feature values, found {}",
                    self.feature_names.len(),
                    vector.len()
                ),
            });
        }
        if self.entries.contains_key(&key) {
            return Err(FeatureTableError::DuplicateKey { line, phone });
        }
        self.max_key_chars = self.max_key_chars.max(key.chars().count());
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, phone: &str) -> bool {
        let key: String = phone.nfd().collect();
        self.entries.contains_key(&key)
    }

    /// Phone keys in sorted order.
    pub fn phones(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        keys.sort_unstable();
        keys
    }

    pub fn features_of(&self, phone: &str) -> Option<&FeatureVector> {
        let key: String = phone.nfd().collect();
        self.entries.get(&key)
    }

    /// Looks a single segment up; unknown text yields a flagged phone with an
    /// all-unspecified vector.
    pub fn resolve(&self, text: &str) -> Phone {
        let key: String = text.nfd().collect();
        match self.entries.get(&key) {
            Some(features) => Phone {
                text: key,
                features: features.clone(),
                unknown: false,
            },
            None => Phone {
                features: FeatureVector::unspecified(self.num_features()),
                text: key,
                unknown: true,
            },
        }
    }
}

impl fmt::Display for FeatureTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FeatureTable({} phones x {} features, version {:?})",
            self.entries.len(),
            self.feature_names.len(),
            self.version
        )
    }
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable, FeatureTableError> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| FeatureTableError::NotUtf8)?;
    FeatureTable::parse_csv(&text)
}

/// Greedy longest-match segmentation of `ipa_text` after NFD normalization.
///
/// Whitespace separates segments and never becomes a phone. Spans that match
/// no key become single-codepoint phones flagged unknown.
pub fn segment(ipa_text: &str, table: &FeatureTable) -> PhoneSequence {
    PhoneSequence {
        utterance_id: String::new(),
        language: String::new(),
        phones: segment_phones(ipa_text, table),
    }
}

pub fn segment_phones(ipa_text: &str, table: &FeatureTable) -> Vec<Phone> {
    let chars: Vec<char> = ipa_text.nfd().collect();
    let mut phones = Vec::new();
    let mut i = 0;
    let mut candidate = String::new();
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut longest = None;
        let max_len = table.max_key_chars.min(chars.len() - i);
        for len in (1..=max_len).rev() {
            if chars[i..i + len].iter().any(|c| c.is_whitespace()) {
                continue;
            }
            candidate.clear();
            candidate.extend(&chars[i..i + len]);
            if let Some(features) = table.entries.get(&candidate) {
                longest = Some((len, features));
                break;
            }
        }
        match longest {
            Some((len, features)) => {
                phones.push(Phone {
                    text: chars[i..i + len].iter().collect(),
                    features: features.clone(),
                    unknown: false,
                });
                i += len;
            }
            None => {
                phones.push(Phone {
                    text: chars[i].to_string(),
                    features: FeatureVector::unspecified(table.num_features()),
                    unknown: true,
                });
                i += 1;
            }
        }
    }
    phones
}

/// Fraction of features on which the two vectors disagree.
///
/// Unspecified (`0`) differs from both `+` and `-`.
pub fn feature_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64, FeatureTableError> {
    if a.len() != b.len() {
        return Err(FeatureTableError::TableMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let differing = a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count();
    Ok(differing as f64 / a.len() as f64)
}

pub fn phone_distance(a: &Phone, b: &Phone) -> Result<f64, FeatureTableError> {
    feature_distance(&a.features, &b.features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(csv: &str) -> FeatureTable {
        FeatureTable::parse_csv(csv).unwrap()
    }

    fn texts(seq: &PhoneSequence) -> Vec<&str> {
        seq.phones.iter().map(|p| p.text.as_str()).collect()
    }

    #[test]
    fn minimal_table() {
        let t = table("phone,syl,cons\na,+,-\n");
        assert_eq!(t.feature_names(), ["syl", "cons"]);
        assert_eq!(
            t.features_of("a").unwrap().values(),
            [FeatureValue::Plus, FeatureValue::Minus]
        );
    }

    #[test]
    fn duplicate_phone_is_rejected() {
        let err = FeatureTable::parse_csv("phone,syl,cons\na,+,-\na,+,+\n").unwrap_err();
        assert!(matches!(err, FeatureTableError::DuplicateKey { line: 3, .. }), "{err}");
    }

    #[test]
    fn composed_and_decomposed_keys_collide() {
        // U+00E3 and a + U+0303 are the same segment after NFD.
        let err = FeatureTable::parse_csv("phone,nas\n\u{e3},+\na\u{303},+\n").unwrap_err();
        assert!(matches!(err, FeatureTableError::DuplicateKey { .. }));
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = FeatureTable::parse_csv("# c\nphone,syl,cons\na,+\n").unwrap_err();
        match err {
            FeatureTableError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_value_symbol() {
        let err = FeatureTable::parse_csv("phone,syl\na,x\n").unwrap_err();
        assert!(matches!(err, FeatureTableError::Value { line: 2, .. }));
    }

    #[test]
    fn duplicate_or_empty_feature_names() {
        assert!(FeatureTable::parse_csv("phone,syl,syl\n").is_err());
        assert!(FeatureTable::parse_csv("phone,syl,\n").is_err());
    }

    #[test]
    fn default_table_has_named_features() {
        let t = FeatureTable::default_table();
        for name in ["tense", "delrel", "lat", "cor", "syl", "cons"] {
            assert!(t.feature_index(name).is_some(), "missing {name}");
        }
        assert_eq!(t.version(), "phonex-default-1");
        assert!(t.contains("tʃ") && t.contains("ã") && t.contains("pʰ"));
    }

    #[test]
    fn segments_simple_string() {
        let t = table("phone,syl\np,-\na,+\n");
        assert_eq!(texts(&segment("pa", &t)), ["p", "a"]);
        assert!(segment("", &t).is_empty());
        assert!(segment("  \t", &t).is_empty());
    }

    #[test]
    fn longest_match_wins() {
        let t = table("phone,syl\ntʃ,-\nt,-\nʃ,-\na,+\n");
        assert_eq!(texts(&segment("tʃa", &t)), ["tʃ", "a"]);
        // whitespace breaks a multi-codepoint key
        assert_eq!(texts(&segment("t ʃa", &t)), ["t", "ʃ", "a"]);
    }

    #[test]
    fn unknown_codepoints_are_flagged_not_dropped() {
        let t = table("phone,syl\na,+\n");
        let seq = segment("aqa", &t);
        assert_eq!(texts(&seq), ["a", "q", "a"]);
        assert_eq!(seq.unknown_positions(), [1]);
        assert_eq!(seq.phones[1].features, FeatureVector::unspecified(1));
    }

    #[test]
    fn precomposed_input_matches_decomposed_key() {
        let t = FeatureTable::default_table();
        let seq = segment("t\u{e3}", &t);
        assert_eq!(seq.len(), 2);
        assert!(!seq.phones[1].unknown);
        assert_eq!(seq.phones[1].text, "a\u{303}");
    }

    #[test]
    fn distance_examples() {
        use FeatureValue::*;
        let v = |xs: &[FeatureValue]| FeatureVector(xs.to_vec());
        assert_eq!(feature_distance(&v(&[Plus, Minus]), &v(&[Plus, Minus])).unwrap(), 0.0);
        assert_eq!(feature_distance(&v(&[Plus, Minus]), &v(&[Minus, Plus])).unwrap(), 1.0);
        let a = v(&[Plus, Minus, Unspecified, Unspecified]);
        let b = v(&[Plus, Plus, Unspecified, Minus]);
        assert_eq!(feature_distance(&a, &b).unwrap(), 0.5);
        assert!(matches!(
            feature_distance(&v(&[Plus]), &v(&[Plus, Plus])),
            Err(FeatureTableError::TableMismatch { .. })
        ));
    }
}
