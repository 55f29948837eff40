use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use phonex_core::formats::decode_utf8;
use phonex_core::ipa::load_feature_table;
use phonex_core::FeatureTable;
use serde::Serialize;

pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: anyhow::Error) -> Self {
        Failure { code: USAGE, error }
    }

    pub fn data(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: DATA,
            error: error.into(),
        }
    }

    pub fn numerical(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: NUMERICAL,
            error: error.into(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Fails before any work starts if an input path is missing.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult {
    for p in paths {
        if !p.exists() || p.is_dir() {
            return Err(Failure::data(anyhow!("{}: no such file", p.display())));
        }
    }
    Ok(())
}

pub fn read_text(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::data)?;
    decode_utf8(bytes)
        .with_context(|| path.display().to_string())
        .map_err(Failure::data)
}

pub fn load_table(path: &Path) -> CliResult<FeatureTable> {
    load_feature_table(path)
        .with_context(|| format!("feature table {}", path.display()))
        .map_err(Failure::data)
}

/// Parses a file with a formats parser, tagging errors with the path.
pub fn parse_file<T, E>(path: &Path, parse: impl FnOnce(&str) -> Result<T, E>) -> CliResult<T>
where
    E: std::error::Error + Send + Sync + 'static,
{
    let text = read_text(path)?;
    parse(&text)
        .with_context(|| path.display().to_string())
        .map_err(Failure::data)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Writes to `path`, or to standard output when absent.
pub fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::data),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .context("writing standard output")
                .map_err(Failure::data)
        }
    }
}

pub fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.1}"))
}

pub fn num(v: f64) -> String {
    format!("{v:.4}")
}
