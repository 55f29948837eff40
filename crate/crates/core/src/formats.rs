//! Text file formats shared by the command-line tools.
//!
//! * transcripts: UTF-8 TSV `utt_id<TAB>lang<TAB>ipa_string`
//! * family map: TSV `lang<TAB>family`
//! * training counts: TSV `lang<TAB>count`
//! * language vectors: CSV `lang,<f1>,...,<fK>`, empty cells for missing values
//! * posterior grids: JSON, see [`PosteriorFile`]
//!
//! Blank lines and lines starting with `#` are skipped in every text format.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{impute_missing, LangVector};
use crate::ctc::{CtcError, LogPosteriorGrid};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("input is not valid UTF-8 (byte offset {0})")]
    NotUtf8(usize),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("utterance {utt_id:?}: {message}")]
    Grid {
        utt_id: String,
        frame: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

fn line_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Line {
        line,
        message: message.into(),
    }
}

/// Decodes bytes as UTF-8 without any lossy replacement.
pub fn decode_utf8(bytes: Vec<u8>) -> Result<String, FormatError> {
    String::from_utf8(bytes).map_err(|e| FormatError::NotUtf8(e.utf8_error().valid_up_to()))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub utt_id: String,
    pub lang: String,
    pub ipa: String,
}

pub fn parse_transcripts(text: &str) -> Result<Vec<TranscriptLine>, FormatError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, l) in content_lines(text) {
        let cols: Vec<&str> = l.splitn(3, '\t').collect();
        if cols.len() < 2 {
            return Err(line_err(line, "expected utt_id<TAB>lang<TAB>ipa_string"));
        }
        let utt_id = cols[0].trim();
        if utt_id.is_empty() {
            return Err(line_err(line, "empty utterance id"));
        }
        if !seen.insert(utt_id.to_string()) {
            return Err(line_err(line, format!("duplicate utterance id {utt_id:?}")));
        }
        out.push(TranscriptLine {
            utt_id: utt_id.to_string(),
            lang: cols[1].trim().to_string(),
            ipa: cols.get(2).copied().unwrap_or("").to_string(),
        });
    }
    Ok(out)
}

pub fn write_transcripts(lines: &[TranscriptLine]) -> String {
    lines
        .iter()
        .map(|l| format!("{}\t{}\t{}\n", l.utt_id, l.lang, l.ipa))
        .collect()
}

fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, FormatError> {
    content_lines(text)
        .map(|(line, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 2 || cols[0].trim().is_empty() {
                return Err(line_err(line, "expected two tab-separated columns"));
            }
            Ok((line, cols[0].trim().to_string(), cols[1].trim().to_string()))
        })
        .collect()
}

pub fn parse_family_map(text: &str) -> Result<BTreeMap<String, String>, FormatError> {
    let mut map = BTreeMap::new();
    for (line, lang, family) in parse_pairs(text)? {
        if map.insert(lang.clone(), family).is_some() {
            return Err(line_err(line, format!("duplicate language {lang:?}")));
        }
    }
    Ok(map)
}

pub fn parse_counts(text: &str) -> Result<BTreeMap<String, f64>, FormatError> {
    let mut map = BTreeMap::new();
    for (line, lang, count) in parse_pairs(text)? {
        let value: f64 = count
            .parse()
            .map_err(|_| line_err(line, format!("invalid count {count:?}")))?;
        if !value.is_finite() || value < 0.0 {
            return Err(line_err(line, format!("count must be non-negative, got {count}")));
        }
        if map.insert(lang.clone(), value).is_some() {
            return Err(line_err(line, format!("duplicate language {lang:?}")));
        }
    }
    Ok(map)
}

/// Parses language vectors and imputes missing cells with feature means.
pub fn parse_lang_vectors(text: &str) -> Result<BTreeMap<String, LangVector>, FormatError> {
    let mut lines = content_lines(text);
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| FormatError::Invalid("empty vector file".into()))?;
    let width = header.split(',').count();
    if width < 2 || header.split(',').next().map(str::trim) != Some("lang") {
        return Err(line_err(header_line, "header must be lang,<f1>,...,<fK>"));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (line, l) in lines {
        let cells: Vec<&str> = l.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(line_err(
                line,
                format!("expected {width} columns, found {}", cells.len()),
            ));
        }
        if !seen.insert(cells[0].to_string()) {
            return Err(line_err(line, format!("duplicate language {:?}", cells[0])));
        }
        let values = cells[1..]
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(Some)
                        .ok_or_else(|| line_err(line, format!("invalid value {c:?}")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((cells[0].to_string(), values));
    }
    let vectors = impute_missing(rows).map_err(|e| FormatError::Invalid(e.to_string()))?;
    Ok(vectors.into_iter().map(|v| (v.lang.clone(), v)).collect())
}

/// Posterior grids for a set of utterances.
///
/// ```json
/// {"symbols": ["<blank>", "p", "a"],
///  "utterances": [{"utt_id": "u1", "lang": "eng", "log_probs": [[-0.1, -2.5, null]]}]}
/// ```
///
/// `symbols[0]` is the blank; `null` stands for a log-probability of minus infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub symbols: Vec<String>,
    pub utterances: Vec<PosteriorUtterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorUtterance {
    pub utt_id: String,
    #[serde(default)]
    pub lang: String,
    pub log_probs: Vec<Vec<Option<f64>>>,
}

impl PosteriorFile {
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let file: PosteriorFile = serde_json::from_str(text)?;
        if file.symbols.len() < 2 {
            return Err(FormatError::Invalid("need a blank and at least one symbol".into()));
        }
        if file.utterances.is_empty() {
            return Err(FormatError::Invalid("posterior file has no utterances".into()));
        }
        Ok(file)
    }

    /// Validates every grid, reporting the first bad frame.
    pub fn grids(&self) -> Result<Vec<LogPosteriorGrid>, FormatError> {
        let classes = self.symbols.len();
        self.utterances
            .iter()
            .map(|u| {
                let grid_err = |frame: usize, message: String| FormatError::Grid {
                    utt_id: u.utt_id.clone(),
                    frame,
                    message,
                };
                if u.log_probs.is_empty() {
                    return Err(grid_err(0, "grid has no frames".into()));
                }
                let mut values = Array2::zeros((u.log_probs.len(), classes));
                for (t, row) in u.log_probs.iter().enumerate() {
                    if row.len() != classes {
                        return Err(grid_err(
                            t,
                            format!("frame {t}: expected {classes} values, found {}", row.len()),
                        ));
                    }
                    for (k, v) in row.iter().enumerate() {
                        values[[t, k]] = v.unwrap_or(f64::NEG_INFINITY);
                    }
                }
                LogPosteriorGrid::new(values).map_err(|e| match e {
                    CtcError::NotNormalized { frame, .. } | CtcError::InvalidValue { frame, .. } => {
                        grid_err(frame, e.to_string())
                    }
                    other => grid_err(0, other.to_string()),
                })
            })
            .collect()
    }

    pub fn from_grids(symbols: Vec<String>, items: Vec<(String, String, &LogPosteriorGrid)>) -> Self {
        PosteriorFile {
            symbols,
            utterances: items
                .into_iter()
                .map(|(utt_id, lang, grid)| PosteriorUtterance {
                    utt_id,
                    lang,
                    log_probs: grid
                        .values()
                        .rows()
                        .into_iter()
                        .map(|r| r.iter().map(|&v| v.is_finite().then_some(v)).collect())
                        .collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcripts_round_trip_and_comments() {
        let text = "# header\nu1\teng\tp a\n\nu2\t\t\nu3\tfra\n";
        let lines = parse_transcripts(text).unwrap();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].ipa, "p a");
        assert_eq!(lines[1].lang, "");
        assert_eq!(lines[2].ipa, "");
        assert_eq!(parse_transcripts(&write_transcripts(&lines)).unwrap(), lines);
    }

    #[test]
    fn transcript_errors_carry_line_numbers() {
        match parse_transcripts("u1\teng\ta\nu1\teng\tb\n").unwrap_err() {
            FormatError::Line { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        assert!(parse_transcripts("justone\n").is_err());
    }

    #[test]
    fn non_utf8_is_rejected() {
        assert!(matches!(decode_utf8(vec![b'a', 0xff]), Err(FormatError::NotUtf8(1))));
    }

    #[test]
    fn counts_and_families() {
        let c = parse_counts("eng\t10\nfra\t2.5\n").unwrap();
        assert_eq!(c["fra"], 2.5);
        assert!(parse_counts("eng\t-1\n").is_err());
        let f = parse_family_map("eng\tIndo-European\n").unwrap();
        assert_eq!(f["eng"], "Indo-European");
    }

    #[test]
    fn vectors_with_gaps() {
        let v = parse_lang_vectors("lang,f1,f2\na,1,\nb,3,4\n").unwrap();
        assert_eq!(v["a"].values, vec![1.0, 4.0]);
        assert!(parse_lang_vectors("lang,f1\na,1,2\n").is_err());
    }

    #[test]
    fn posterior_grid_errors_name_the_frame() {
        let text = r#"{"symbols":["<b>","a"],"utterances":[{"utt_id":"u","log_probs":[[0.0,null],[0.0,0.0]]}]}"#;
        let file = PosteriorFile::parse(text).unwrap();
        match file.grids().unwrap_err() {
            FormatError::Grid { frame, .. } => assert_eq!(frame, 1),
            e => panic!("{e}"),
        }
        let ragged = r#"{"symbols":["<b>","a"],"utterances":[{"utt_id":"u","log_probs":[[0.0]]}]}"#;
        assert!(PosteriorFile::parse(ragged).unwrap().grids().is_err());
        let empty = r#"{"symbols":["<b>","a"],"utterances":[]}"#;
        assert!(PosteriorFile::parse(empty).is_err());
    }
}
