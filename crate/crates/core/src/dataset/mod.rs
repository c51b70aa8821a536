//! Interaction logs to evaluation-ready splits.

pub mod batch;
pub mod filter;
pub mod groups;
pub mod ingest;
pub mod snapshot;
pub mod split;
pub mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, Batches, SequenceBatch};
pub use filter::{k_core_filter, Catalog, Filtered, UserIndex, PAD_ID};
pub use groups::{compute_groups, EvalGroups, LengthBucket, Popularity, UserGroup};
pub use ingest::{ingest, parse_interactions, Ingested, InputFormat, Interaction};
pub use split::{build_sequences, leave_one_out, Example, Phase, Split, UserSequence};

use crate::config::DataConfig;
use crate::error::Result;

/// Corpus statistics in the usual benchmark-table layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub items: usize,
    pub actions: usize,
    pub avg_len: f64,
    /// Fraction of empty user x item cells, in `[0, 1]`.
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn compute(sequences: &[UserSequence], num_items: usize) -> Self {
        let actions: usize = sequences.iter().map(|s| s.items.len()).sum();
        let n = sequences.len();
        let cells = n as f64 * num_items as f64;
        Self {
            sequences: n,
            items: num_items,
            actions,
            avg_len: if n == 0 { 0.0 } else { actions as f64 / n as f64 },
            sparsity: if cells == 0.0 { 0.0 } else { 1.0 - actions as f64 / cells },
        }
    }
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#Sequence {} | #Items {} | #Actions {} | Avg_len {:.2} | Sparsity {:.2}%",
            thousands(self.sequences),
            thousands(self.items),
            thousands(self.actions),
            self.avg_len,
            self.sparsity * 100.0
        )
    }
}

/// The preprocessed corpus: filtered catalog, sequences, split and groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub catalog: Catalog,
    pub users: UserIndex,
    pub sequences: Vec<UserSequence>,
    pub split: Split,
    /// Training-portion counts indexed by dense id.
    pub train_popularity: Vec<u64>,
    pub groups: EvalGroups,
    pub filter_iterations: usize,
}

impl Dataset {
    pub fn from_interactions(rows: &[Interaction], config: &DataConfig) -> Result<Self> {
        let filtered = k_core_filter(rows, config.min_count, config.iterative_filter)?;
        log::info!(
            "{}-core filter kept {} of {} rows after {} passes",
            config.min_count,
            filtered.interactions.len(),
            rows.len(),
            filtered.iterations
        );
        let sequences = build_sequences(&filtered.interactions, &filtered.catalog, &filtered.users);
        let split = leave_one_out(&sequences);
        if split.train_only_users > 0 {
            log::info!("{} users too short for validation/test", split.train_only_users);
        }
        let train_popularity = split.train_popularity(filtered.catalog.len());
        let groups = compute_groups(&split.test, &train_popularity);
        Ok(Self {
            config: config.clone(),
            catalog: filtered.catalog,
            users: filtered.users,
            sequences,
            split,
            train_popularity,
            groups,
            filter_iterations: filtered.iterations,
        })
    }

    /// Reads `config.path`, or generates the synthetic corpus when one is
    /// configured.
    pub fn load(config: &DataConfig) -> Result<Self> {
        if let Some(corpus) = &config.synthetic {
            return Self::from_interactions(&corpus.generate(), config);
        }
        let path = config
            .path
            .as_ref()
            .ok_or_else(|| crate::Error::Config("data.path is not set".into()))?;
        let ingested = ingest(path, config.format, config.strict)?;
        log::info!(
            "read {} interactions from {} ({} skipped)",
            ingested.interactions.len(),
            path.display(),
            ingested.skipped
        );
        Self::from_interactions(&ingested.interactions, config)
    }

    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::compute(&self.sequences, self.catalog.len())
    }
}
