//! Evaluation groups: head/long-tail by the popularity of the most recent
//! context item, and short/middle/long by context length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::split::Example;

/// Fraction of the catalog counted as head items.
pub const HEAD_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Popularity {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBucket {
    Short,
    Middle,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroup {
    pub popularity: Popularity,
    pub length: LengthBucket,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGroups {
    /// `is_head[id]` for every dense id (slot 0 is the pad id).
    pub is_head: Vec<bool>,
    /// Context lengths at or below this are short.
    pub short_max: usize,
    /// Context lengths above this are long.
    pub long_min_exclusive: usize,
    #[serde(with = "pairs")]
    pub users: BTreeMap<u32, UserGroup>,
}

/// Encodes the user map as a list of `[user, group]` pairs so integer keys
/// survive self-describing formats.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::UserGroup;

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, UserGroup>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<(u32, UserGroup)> = m.iter().map(|(k, v)| (*k, *v)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, UserGroup>, D::Error> {
        Ok(Vec::<(u32, UserGroup)>::deserialize(d)?.into_iter().collect())
    }
}

impl EvalGroups {
    pub fn get(&self, user: u32) -> Option<UserGroup> {
        self.users.get(&user).copied()
    }
}

/// Nearest-rank percentile of a sorted slice.
pub fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Head items: the top [`HEAD_FRACTION`] of items by `popularity` (rounded
/// up), ties broken by ascending dense id.
pub fn head_items(popularity: &[u64]) -> Vec<bool> {
    let n = popularity.len().saturating_sub(1);
    let mut ids: Vec<u32> = (1..=n as u32).collect();
    ids.sort_by(|&a, &b| popularity[b as usize].cmp(&popularity[a as usize]).then(a.cmp(&b)));
    let head_n = (HEAD_FRACTION * n as f64).ceil() as usize;
    let mut is_head = vec![false; n + 1];
    for &i in &ids[..head_n.min(n)] {
        is_head[i as usize] = true;
    }
    is_head
}

/// Labels every case in `cases` (normally the test split). `popularity` is
/// indexed by dense id and should come from training interactions only.
pub fn compute_groups(cases: &[Example], popularity: &[u64]) -> EvalGroups {
    let is_head = head_items(popularity);
    let mut lengths: Vec<usize> = cases.iter().map(|c| c.context.len()).collect();
    lengths.sort_unstable();
    let (short_max, long_min_exclusive) = if lengths.is_empty() {
        (0, 0)
    } else {
        (nearest_rank(&lengths, 0.25), nearest_rank(&lengths, 0.75))
    };
    let users = cases
        .iter()
        .map(|c| {
            let last = *c.context.last().expect("evaluation context is never empty");
            let popularity = if is_head[last as usize] {
                Popularity::Head
            } else {
                Popularity::Tail
            };
            let len = c.context.len();
            let length = if len <= short_max {
                LengthBucket::Short
            } else if len <= long_min_exclusive {
                LengthBucket::Middle
            } else {
                LengthBucket::Long
            };
            (c.user, UserGroup { popularity, length })
        })
        .collect();
    EvalGroups {
        is_head,
        short_max,
        long_min_exclusive,
        users,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(user: u32, context: Vec<u32>) -> Example {
        Example { user, context, target: 1 }
    }

    #[test]
    fn top_two_of_ten_are_head() {
        let mut pop = vec![0u64; 11];
        for (i, p) in pop.iter_mut().enumerate().skip(1) {
            *p = i as u64;
        }
        let g = compute_groups(&[case(0, vec![3, 10]), case(1, vec![10, 3])], &pop);
        assert_eq!(g.is_head.iter().filter(|h| **h).count(), 2);
        assert!(g.is_head[10] && g.is_head[9]);
        assert_eq!(g.get(0).unwrap().popularity, Popularity::Head);
        assert_eq!(g.get(1).unwrap().popularity, Popularity::Tail);
    }

    #[test]
    fn uniform_popularity_ties_go_to_low_ids() {
        let pop = vec![0, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4];
        let h = head_items(&pop);
        assert_eq!(h, vec![false, true, true, false, false, false, false, false, false, false, false]);
    }

    /// Smallest observed value v such that at least a fraction q of values are <= v.
    fn percentile_oracle(values: &[usize], q: f64) -> usize {
        let mut candidates = values.to_vec();
        candidates.sort_unstable();
        candidates.dedup();
        *candidates
            .iter()
            .find(|&&v| values.iter().filter(|&&x| x <= v).count() as f64 >= q * values.len() as f64)
            .unwrap()
    }

    #[test]
    fn length_buckets_match_percentile_oracle() {
        let lens = [3usize, 9, 4, 4, 12, 7, 5, 5, 20, 6, 8, 4];
        let cases: Vec<_> = lens
            .iter()
            .enumerate()
            .map(|(u, &l)| case(u as u32, vec![1; l]))
            .collect();
        let g = compute_groups(&cases, &[0, 1]);
        let p25 = percentile_oracle(&lens, 0.25);
        let p75 = percentile_oracle(&lens, 0.75);
        assert_eq!((g.short_max, g.long_min_exclusive), (p25, p75));
        for (u, &l) in lens.iter().enumerate() {
            let want = if l <= p25 {
                LengthBucket::Short
            } else if l <= p75 {
                LengthBucket::Middle
            } else {
                LengthBucket::Long
            };
            assert_eq!(g.get(u as u32).unwrap().length, want, "user {u} len {l}");
        }
    }

    #[test]
    fn distinct_lengths_split_one_two_one() {
        let cases: Vec<_> = (0..8).map(|u| case(u, vec![1; u as usize + 1])).collect();
        let g = compute_groups(&cases, &[0, 1]);
        let count = |b| g.users.values().filter(|x| x.length == b).count();
        assert_eq!((count(LengthBucket::Short), count(LengthBucket::Middle), count(LengthBucket::Long)), (2, 4, 2));
    }
}
