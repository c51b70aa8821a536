//! Seeded synthetic corpora with a known next-item rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ingest::Interaction;
use crate::rng;

/// First-order Markov corpus: every item has a fixed, seeded set of
/// successors with decreasing weights; with probability `noise` the next
/// item is drawn uniformly instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovCorpus {
    pub num_users: usize,
    pub num_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub successors: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MarkovCorpus {
    fn default() -> Self {
        Self {
            num_users: 2000,
            num_items: 300,
            min_len: 8,
            max_len: 24,
            successors: 3,
            noise: 0.1,
            seed: 2024,
        }
    }
}

impl MarkovCorpus {
    /// Successor lists: `table[i]` holds the successors of item `i`
    /// (0-based) in decreasing order of probability.
    pub fn transition_table(&self) -> Vec<Vec<usize>> {
        let mut r = rng::stream(self.seed, "markov-transitions");
        (0..self.num_items)
            .map(|i| {
                let mut succ: Vec<usize> = Vec::with_capacity(self.successors);
                while succ.len() < self.successors.min(self.num_items - 1) {
                    let j = r.random_range(0..self.num_items);
                    if j != i && !succ.contains(&j) {
                        succ.push(j);
                    }
                }
                succ
            })
            .collect()
    }

    /// Weight of the `k`-th successor before normalisation.
    fn weight(k: usize) -> f64 {
        1.0 / (k + 1) as f64
    }

    pub fn generate(&self) -> Vec<Interaction> {
        assert!(self.num_items >= 2 && self.min_len >= 1 && self.min_len <= self.max_len);
        let table = self.transition_table();
        let mut r = rng::stream(self.seed, "markov-walks");
        let mut out = Vec::new();
        for u in 0..self.num_users {
            let len = r.random_range(self.min_len..=self.max_len);
            let mut cur = r.random_range(0..self.num_items);
            for step in 0..len {
                out.push(Interaction {
                    user: format!("u{u}"),
                    item: format!("i{cur}"),
                    timestamp: step as i64,
                });
                let succ = &table[cur];
                cur = if succ.is_empty() || r.random_bool(self.noise.clamp(0.0, 1.0)) {
                    r.random_range(0..self.num_items)
                } else {
                    let total: f64 = (0..succ.len()).map(Self::weight).sum();
                    let mut x = r.random::<f64>() * total;
                    let mut pick = succ[succ.len() - 1];
                    for (k, &s) in succ.iter().enumerate() {
                        x -= Self::weight(k);
                        if x < 0.0 {
                            pick = s;
                            break;
                        }
                    }
                    pick
                };
            }
        }
        out
    }
}
