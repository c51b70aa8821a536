//! Chronological user sequences and the leave-one-out split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::filter::{Catalog, UserIndex};
use super::ingest::Interaction;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<u32>,
}

/// One sequence per user in dense-user order, sorted by timestamp. The sort
/// is stable, so equal timestamps keep file order.
pub fn build_sequences(interactions: &[Interaction], catalog: &Catalog, users: &UserIndex) -> Vec<UserSequence> {
    let user_pos: HashMap<&str, usize> = users
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let mut events: Vec<Vec<(i64, u32)>> = vec![Vec::new(); users.users.len()];
    for x in interactions {
        let (Some(&u), Some(item)) = (user_pos.get(x.user.as_str()), catalog.dense(&x.item)) else {
            continue;
        };
        events[u].push((x.timestamp, item));
    }
    events
        .into_iter()
        .enumerate()
        .map(|(u, mut ev)| {
            ev.sort_by_key(|&(t, _)| t);
            UserSequence {
                user: u as u32,
                items: ev.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect()
}

/// A `(context, target)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub user: u32,
    pub context: Vec<u32>,
    pub target: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Valid,
    Test,
}

/// Leave-one-out split.
///
/// For a sequence `[i_1, ..., i_n]` with `n >= 3` the test case is
/// `[i_1..i_{n-1}] -> i_n`, the validation case is `[i_1..i_{n-2}] ->
/// i_{n-1}`, and the training portion is `[i_1..i_{n-2}]`. Shorter users
/// keep their whole sequence for training and are not evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<UserSequence>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Users too short to evaluate.
    pub train_only_users: usize,
}

pub fn leave_one_out(sequences: &[UserSequence]) -> Split {
    let mut split = Split {
        train: Vec::with_capacity(sequences.len()),
        valid: Vec::new(),
        test: Vec::new(),
        train_only_users: 0,
    };
    for s in sequences {
        let n = s.items.len();
        if n < 3 {
            split.train_only_users += 1;
            split.train.push(s.clone());
            continue;
        }
        split.train.push(UserSequence {
            user: s.user,
            items: s.items[..n - 2].to_vec(),
        });
        split.valid.push(Example {
            user: s.user,
            context: s.items[..n - 2].to_vec(),
            target: s.items[n - 2],
        });
        split.test.push(Example {
            user: s.user,
            context: s.items[..n - 1].to_vec(),
            target: s.items[n - 1],
        });
    }
    split
}

impl Split {
    /// Training pairs. By default each user contributes its final
    /// `(prefix -> last training item)` pair; with `all_prefixes` every
    /// position after the first becomes a target.
    pub fn train_examples(&self, all_prefixes: bool) -> Vec<Example> {
        let mut out = Vec::new();
        for s in &self.train {
            let n = s.items.len();
            if n < 2 {
                continue;
            }
            let first = if all_prefixes { 1 } else { n - 1 };
            for j in first..n {
                out.push(Example {
                    user: s.user,
                    context: s.items[..j].to_vec(),
                    target: s.items[j],
                });
            }
        }
        out
    }

    pub fn examples(&self, phase: Phase, all_prefixes: bool) -> Vec<Example> {
        match phase {
            Phase::Train => self.train_examples(all_prefixes),
            Phase::Valid => self.valid.clone(),
            Phase::Test => self.test.clone(),
        }
    }

    /// Per-item interaction counts over the training portion, indexed by
    /// dense id (slot 0 is the pad id and stays 0).
    pub fn train_popularity(&self, num_items: usize) -> Vec<u64> {
        let mut pop = vec![0u64; num_items + 1];
        for s in &self.train {
            for &i in &s.items {
                pop[i as usize] += 1;
            }
        }
        pop
    }
}
