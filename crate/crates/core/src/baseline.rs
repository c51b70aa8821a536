//! Most-popular baseline: every user gets the same ranking by training
//! interaction count.

use crate::dataset::SequenceBatch;
use crate::error::Result;
use crate::eval::Recommender;
use crate::tensor::Matrix;

pub struct Popularity {
    scores: Vec<f64>,
    max_len: usize,
}

impl Popularity {
    /// `popularity` is indexed by dense id with the pad slot at 0.
    pub fn new(popularity: &[u64], max_len: usize) -> Self {
        Self {
            scores: popularity.iter().skip(1).map(|&c| c as f64).collect(),
            max_len,
        }
    }
}

impl Recommender for Popularity {
    fn num_items(&self) -> usize {
        self.scores.len()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn scores(&self, batch: &SequenceBatch) -> Result<Matrix> {
        let rows = vec![self.scores.clone(); batch.size()];
        Ok(if rows.is_empty() {
            Matrix::zeros(0, self.scores.len())
        } else {
            Matrix::from_rows(&rows)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;
    use crate::eval::{evaluate, EvalOptions};

    fn cases(targets: &[u32]) -> Vec<Example> {
        targets
            .iter()
            .enumerate()
            .map(|(u, &t)| Example {
                user: u as u32,
                context: vec![1],
                target: t,
            })
            .collect()
    }

    #[test]
    fn dominant_item_is_always_hit() {
        let rec = Popularity::new(&[0, 1, 50, 2, 3], 4);
        let m = evaluate(&rec, &cases(&[2; 9]), &EvalOptions::default()).unwrap();
        assert_eq!(m.hr5, 1.0);
        assert_eq!(m.ndcg10, 1.0);
    }

    #[test]
    fn uniform_popularity_ranks_by_id() {
        // 20 items with equal counts; the target with id j ranks j-th.
        let rec = Popularity::new(&[0; 21].map(|_| 7), 4);
        let targets: Vec<u32> = (1..=20).collect();
        let m = evaluate(&rec, &cases(&targets), &EvalOptions::default()).unwrap();
        assert_eq!(m.hr5, 5.0 / 20.0);
        assert_eq!(m.hr10, 10.0 / 20.0);
        let want: f64 = (1..=10).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / 20.0;
        assert!((m.ndcg10 - want).abs() < 1e-15);
        assert_eq!(m, evaluate(&rec, &cases(&targets), &EvalOptions::default()).unwrap());
    }
}
