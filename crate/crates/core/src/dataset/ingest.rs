//! Interaction-log readers.
//!
//! Supported layouts:
//! * `tsv`: `user<TAB>item<TAB>timestamp[<TAB>...]`; lines without a tab are
//!   split on whitespace instead.
//! * `csv`: `user,item,timestamp[,...]`.
//! * `movielens_dat`: `user::item::rating::timestamp`.
//!
//! Blank lines and lines starting with `#` are ignored. For `tsv` and `csv`
//! a first line whose timestamp column is not an integer is treated as a
//! header.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    #[default]
    Tsv,
    Csv,
    MovielensDat,
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            "csv" => Ok(Self::Csv),
            "movielens_dat" | "dat" => Ok(Self::MovielensDat),
            other => Err(Error::InvalidArgument(format!("unknown input format {other:?}"))),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tsv => "tsv",
            Self::Csv => "csv",
            Self::MovielensDat => "movielens_dat",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub interactions: Vec<Interaction>,
    /// Malformed rows dropped in lenient mode.
    pub skipped: usize,
}

pub fn ingest(path: &Path, format: InputFormat, strict: bool) -> Result<Ingested> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    let out = parse_interactions(&text, format, strict)?;
    if out.interactions.is_empty() {
        warn!("{} contains no interactions", path.display());
    }
    Ok(out)
}

pub fn parse_interactions(text: &str, format: InputFormat, strict: bool) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let is_first = std::mem::replace(&mut first, false);
        match parse_line(line, format) {
            Ok(x) => out.interactions.push(x),
            Err(_) if is_first && format != InputFormat::MovielensDat && looks_like_header(line, format) => {}
            Err(message) if strict => return Err(Error::Parse { line: line_no, message }),
            Err(message) => {
                warn!("skipping line {line_no}: {message}");
                out.skipped += 1;
            }
        }
    }
    Ok(out)
}

fn fields(line: &str, format: InputFormat) -> Vec<&str> {
    match format {
        InputFormat::Tsv if line.contains('\t') => line.split('\t').collect(),
        InputFormat::Tsv => line.split_whitespace().collect(),
        InputFormat::Csv => line.split(',').collect(),
        InputFormat::MovielensDat => line.split("::").collect(),
    }
}

fn looks_like_header(line: &str, format: InputFormat) -> bool {
    let f = fields(line, format);
    f.len() >= 3 && f[2].trim().parse::<i64>().is_err()
}

fn parse_line(line: &str, format: InputFormat) -> std::result::Result<Interaction, String> {
    let f = fields(line, format);
    let (user, item, ts) = match format {
        InputFormat::MovielensDat => {
            if f.len() != 4 {
                return Err(format!("expected 4 '::'-separated fields, found {}", f.len()));
            }
            (f[0], f[1], f[3])
        }
        _ => {
            if f.len() < 3 {
                return Err(format!("expected at least 3 fields, found {}", f.len()));
            }
            (f[0], f[1], f[2])
        }
    };
    let (user, item, ts) = (user.trim(), item.trim(), ts.trim());
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp = ts
        .parse::<i64>()
        .map_err(|e| format!("bad timestamp {ts:?}: {e}"))?;
    Ok(Interaction {
        user: user.to_owned(),
        item: item.to_owned(),
        timestamp,
    })
}
