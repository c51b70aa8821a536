//! k-core filtering and dense id assignment.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ingest::Interaction;
use crate::error::{Error, Result};

/// Reserved dense id for padding. Real items are `1..=num_items`.
pub const PAD_ID: u32 = 0;

/// Bijection between raw item ids and dense ids in `1..=len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// `items[k]` is the raw id of dense item `k + 1`.
    items: Vec<String>,
    /// Interaction count of each item in the filtered log, indexed like `items`.
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Catalog {
    pub fn new(items: Vec<String>, counts: Vec<u64>) -> Self {
        assert_eq!(items.len(), counts.len());
        let index = items
            .iter()
            .enumerate()
            .map(|(k, s)| (s.clone(), k as u32 + 1))
            .collect();
        Self { items, counts, index }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dense(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: u32) -> Option<&str> {
        if dense == PAD_ID {
            return None;
        }
        self.items.get(dense as usize - 1).map(String::as_str)
    }

    /// Count of `dense` in the filtered log.
    pub fn count(&self, dense: u32) -> u64 {
        self.counts[dense as usize - 1]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.items
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Rebuilds the lookup table after deserialisation.
    pub(crate) fn reindex(&mut self) {
        self.index = self
            .items
            .iter()
            .enumerate()
            .map(|(k, s)| (s.clone(), k as u32 + 1))
            .collect();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserIndex {
    /// `users[u]` is the raw id of dense user `u`.
    pub users: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Filtered {
    /// Surviving rows in original file order.
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub users: UserIndex,
    /// Number of removal passes run (the last pass removes nothing when
    /// iterating to a fixpoint).
    pub iterations: usize,
}

/// Removes users and items with fewer than `min_count` interactions.
///
/// With `iterate` the removal repeats until no row is dropped, so every
/// surviving user and item has at least `min_count` surviving rows. Dense
/// ids follow first appearance in the filtered log.
pub fn k_core_filter(interactions: &[Interaction], min_count: usize, iterate: bool) -> Result<Filtered> {
    if interactions.is_empty() {
        return Err(Error::DatasetCollapsed("no interactions to filter".into()));
    }
    let mut keep: Vec<bool> = vec![true; interactions.len()];
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (x, _) in interactions.iter().zip(&keep).filter(|(_, k)| **k) {
            *user_deg.entry(&x.user).or_default() += 1;
            *item_deg.entry(&x.item).or_default() += 1;
        }
        let mut removed = 0;
        for (x, k) in interactions.iter().zip(keep.iter_mut()) {
            if *k && (user_deg[x.user.as_str()] < min_count || item_deg[x.item.as_str()] < min_count) {
                *k = false;
                removed += 1;
            }
        }
        if removed == 0 || !iterate {
            break;
        }
    }
    let kept: Vec<Interaction> = interactions
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(x, _)| x.clone())
        .collect();
    if kept.is_empty() {
        return Err(Error::DatasetCollapsed(format!(
            "{min_count}-core filtering removed all {} interactions",
            interactions.len()
        )));
    }

    let mut item_ids: Vec<String> = Vec::new();
    let mut item_counts: Vec<u64> = Vec::new();
    let mut item_pos: HashMap<&str, usize> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut user_pos: HashMap<&str, usize> = HashMap::new();
    for x in &kept {
        let k = *item_pos.entry(&x.item).or_insert_with(|| {
            item_ids.push(x.item.clone());
            item_counts.push(0);
            item_ids.len() - 1
        });
        item_counts[k] += 1;
        user_pos.entry(&x.user).or_insert_with(|| {
            users.push(x.user.clone());
            users.len() - 1
        });
    }
    Ok(Filtered {
        catalog: Catalog::new(item_ids, item_counts),
        users: UserIndex { users },
        iterations,
        interactions: kept,
    })
}
