//! Line-JSON snapshot of a preprocessed [`Dataset`].
//!
//! One JSON object per line, each tagged by `"kind"`:
//!
//! 1. `header`: format name, version, data-config hash, the data config,
//!    corpus statistics and the number of filter passes;
//! 2. `catalog`: raw item ids in dense order and their filtered counts;
//! 3. `users`: raw user ids in dense order;
//! 4. one `sequence` line per user;
//! 5. `split`, `popularity`, `groups`.
//!
//! The reader requires exactly this order and cross-checks counts.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Catalog, Dataset, DatasetStats, EvalGroups, Split, UserIndex, UserSequence};
use crate::config::{config_hash, DataConfig, RunConfig};
use crate::error::{Error, Result};

pub const SNAPSHOT_FORMAT: &str = "flowrec-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u32,
        config_hash: String,
        config: DataConfig,
        /// Full run configuration of the command that wrote the file.
        #[serde(default)]
        run: Option<RunConfig>,
        stats: DatasetStats,
        filter_iterations: usize,
    },
    Catalog {
        catalog: Catalog,
    },
    Users {
        users: UserIndex,
    },
    Sequence(UserSequence),
    Split {
        split: Split,
    },
    Popularity {
        train_popularity: Vec<u64>,
    },
    Groups {
        groups: EvalGroups,
    },
}

pub fn write_snapshot<W: Write>(ds: &Dataset, run: Option<&RunConfig>, mut w: W) -> Result<()> {
    let mut line = |rec: &Record| -> Result<()> {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<snapshot>", e))
    };
    line(&Record::Header {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        config_hash: config_hash(&ds.config),
        config: ds.config.clone(),
        run: run.cloned(),
        stats: ds.stats(),
        filter_iterations: ds.filter_iterations,
    })?;
    line(&Record::Catalog {
        catalog: ds.catalog.clone(),
    })?;
    line(&Record::Users { users: ds.users.clone() })?;
    for s in &ds.sequences {
        line(&Record::Sequence(s.clone()))?;
    }
    line(&Record::Split { split: ds.split.clone() })?;
    line(&Record::Popularity {
        train_popularity: ds.train_popularity.clone(),
    })?;
    line(&Record::Groups {
        groups: ds.groups.clone(),
    })
}

pub fn save_snapshot(ds: &Dataset, run: Option<&RunConfig>, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_snapshot(ds, run, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<(Dataset, Option<RunConfig>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_snapshot_with_config(&text)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptSnapshot(msg.into())
}

pub fn parse_snapshot(text: &str) -> Result<Dataset> {
    parse_snapshot_with_config(text).map(|(ds, _)| ds)
}

/// Like [`parse_snapshot`], also returning the embedded run config.
pub fn parse_snapshot_with_config(text: &str) -> Result<(Dataset, Option<RunConfig>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| -> Result<Record> {
        let (n, l) = lines.next().ok_or_else(|| corrupt(format!("missing {what} record")))?;
        serde_json::from_str(l).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))
    };

    let Record::Header {
        format,
        version,
        config_hash: hash,
        config,
        run,
        stats,
        filter_iterations,
    } = next("header")?
    else {
        return Err(corrupt("first record is not a header"));
    };
    if format != SNAPSHOT_FORMAT {
        return Err(corrupt(format!("unknown format {format:?}")));
    }
    if version != SNAPSHOT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    if hash != config_hash(&config) {
        return Err(corrupt("config hash does not match embedded config"));
    }
    let Record::Catalog { mut catalog } = next("catalog")? else {
        return Err(corrupt("expected catalog record"));
    };
    if catalog.raw_ids().len() != catalog.counts().len() {
        return Err(corrupt("catalog ids and counts differ in length"));
    }
    catalog.reindex();
    let Record::Users { users } = next("users")? else {
        return Err(corrupt("expected users record"));
    };
    let num_items = catalog.len() as u32;
    let mut sequences = Vec::with_capacity(users.users.len());
    for u in 0..users.users.len() {
        let Record::Sequence(s) = next("sequence")? else {
            return Err(corrupt("expected a sequence record"));
        };
        if s.user as usize != u {
            return Err(corrupt(format!("sequence for user {} out of order", s.user)));
        }
        if s.items.iter().any(|&i| i == 0 || i > num_items) {
            return Err(corrupt(format!("user {u} has an out-of-range item")));
        }
        sequences.push(s);
    }
    let Record::Split { split } = next("split")? else {
        return Err(corrupt("expected split record"));
    };
    let Record::Popularity { train_popularity } = next("popularity")? else {
        return Err(corrupt("expected popularity record"));
    };
    let Record::Groups { groups } = next("groups")? else {
        return Err(corrupt("expected groups record"));
    };
    if train_popularity.len() != catalog.len() + 1 || groups.is_head.len() != catalog.len() + 1 {
        return Err(corrupt("popularity/groups do not match the catalog size"));
    }
    let n_users = users.users.len() as u32;
    let cases_ok = split
        .valid
        .iter()
        .chain(&split.test)
        .all(|c| c.user < n_users && c.target >= 1 && c.target <= num_items && !c.context.is_empty() && c.context.iter().all(|&i| i >= 1 && i <= num_items));
    let train_ok = split
        .train
        .iter()
        .all(|s| s.user < n_users && s.items.iter().all(|&i| i >= 1 && i <= num_items));
    if !cases_ok || !train_ok {
        return Err(corrupt("split references unknown users or items"));
    }
    let ds = Dataset {
        config,
        catalog,
        users,
        sequences,
        split,
        train_popularity,
        groups,
        filter_iterations,
    };
    if ds.stats() != stats {
        return Err(corrupt("statistics do not match the stored sequences"));
    }
    if run.as_ref().is_some_and(|r| r.data != ds.config) {
        return Err(corrupt("embedded run config disagrees with the data config"));
    }
    Ok((ds, run))
}
