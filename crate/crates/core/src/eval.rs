//! Full-catalog ranking metrics and evaluation reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{EvalGroups, Example, LengthBucket, Popularity, SequenceBatch};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Anything that scores the whole catalog for a batch of contexts.
pub trait Recommender: Sync {
    fn num_items(&self) -> usize;
    /// Context window the batches must be padded to.
    fn max_len(&self) -> usize;
    /// `[B, num_items]` scores; column `j` belongs to dense item `j + 1`.
    fn scores(&self, batch: &SequenceBatch) -> Result<Matrix>;
}

/// 1-based rank of `target` under the tie rule: every item with a higher
/// score, and every equal-scored item with a lower id, ranks ahead.
pub fn rank_of_target(scores: &[f64], target: u32) -> usize {
    let ti = target as usize - 1;
    let ts = scores[ti];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && j < ti) {
            rank += 1;
        }
    }
    rank
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Averages over users, as fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "hr@5")]
    pub hr5: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "hr@10")]
    pub hr10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    pub users: usize,
}

impl Metrics {
    /// Sums in the given order, so equal rank vectors give equal bits.
    pub fn from_ranks<'a>(ranks: impl IntoIterator<Item = &'a usize>) -> Self {
        let mut m = Metrics::default();
        for &r in ranks {
            m.hr5 += hr_at_k(r, 5);
            m.ndcg5 += ndcg_at_k(r, 5);
            m.hr10 += hr_at_k(r, 10);
            m.ndcg10 += ndcg_at_k(r, 10);
            m.users += 1;
        }
        if m.users > 0 {
            let n = m.users as f64;
            m.hr5 /= n;
            m.ndcg5 /= n;
            m.hr10 /= n;
            m.ndcg10 /= n;
        }
        m
    }

    fn percent_json(&self) -> Value {
        json!({
            "hr@5": percent(self.hr5),
            "ndcg@5": percent(self.ndcg5),
            "hr@10": percent(self.hr10),
            "ndcg@10": percent(self.ndcg10),
            "users": self.users,
        })
    }
}

/// A fraction as a percentage rounded to four decimals.
pub fn percent(x: f64) -> f64 {
    (x * 100.0 * 1e4).round() / 1e4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub workers: usize,
    /// Push already-seen items to the bottom of the ranking.
    pub mask_history: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            workers: 1,
            mask_history: false,
        }
    }
}

fn ranks_serial<R: Recommender + ?Sized>(rec: &R, cases: &[Example], opts: &EvalOptions) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(opts.batch_size.max(1)) {
        let batch = SequenceBatch::from_examples(chunk, rec.max_len());
        let mut scores = rec.scores(&batch)?;
        if scores.shape() != (chunk.len(), rec.num_items()) {
            return Err(Error::InvalidArgument(format!(
                "recommender returned {:?} scores for {} cases and {} items",
                scores.shape(),
                chunk.len(),
                rec.num_items()
            )));
        }
        for (r, case) in chunk.iter().enumerate() {
            if case.target == 0 || case.target as usize > rec.num_items() {
                return Err(Error::InvalidArgument(format!("target {} is not a catalog item", case.target)));
            }
            let row = scores.row_mut(r);
            if opts.mask_history {
                for &i in &case.context {
                    if i != case.target {
                        row[i as usize - 1] = f64::NEG_INFINITY;
                    }
                }
            }
            out.push(rank_of_target(row, case.target));
        }
    }
    Ok(out)
}

/// Rank of every case's target, in case order. Cases are split into
/// contiguous shards, one per worker; the result does not depend on the
/// worker count.
pub fn ranks<R: Recommender + ?Sized>(rec: &R, cases: &[Example], opts: &EvalOptions) -> Result<Vec<usize>> {
    let workers = opts.workers.max(1).min(cases.len().max(1));
    if workers == 1 {
        return ranks_serial(rec, cases, opts);
    }
    let shard = cases.len().div_ceil(workers);
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .chunks(shard)
            .map(|c| s.spawn(move || ranks_serial(rec, c, opts)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(cases.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate<R: Recommender + ?Sized>(rec: &R, cases: &[Example], opts: &EvalOptions) -> Result<Metrics> {
    Ok(Metrics::from_ranks(&ranks(rec, cases, opts)?))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub head: Metrics,
    pub tail: Metrics,
    pub short: Metrics,
    pub middle: Metrics,
    pub long: Metrics,
}

impl GroupMetrics {
    /// Splits per-case ranks by the users' group labels.
    pub fn from_ranks(cases: &[Example], ranks: &[usize], groups: &EvalGroups) -> Result<Self> {
        let mut buckets: [Vec<usize>; 5] = Default::default();
        for (c, &r) in cases.iter().zip(ranks) {
            let g = groups
                .get(c.user)
                .ok_or_else(|| Error::InvalidArgument(format!("user {} has no group label", c.user)))?;
            let p = match g.popularity {
                Popularity::Head => 0,
                Popularity::Tail => 1,
            };
            let l = match g.length {
                LengthBucket::Short => 2,
                LengthBucket::Middle => 3,
                LengthBucket::Long => 4,
            };
            buckets[p].push(r);
            buckets[l].push(r);
        }
        let m = |i: usize| Metrics::from_ranks(&buckets[i]);
        Ok(Self {
            head: m(0),
            tail: m(1),
            short: m(2),
            middle: m(3),
            long: m(4),
        })
    }

    fn percent_json(&self) -> Value {
        json!({
            "head": self.head.percent_json(),
            "tail": self.tail.percent_json(),
            "short": self.short.percent_json(),
            "middle": self.middle.percent_json(),
            "long": self.long.percent_json(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub steps: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Sampling steps used for the inference measurement.
    pub steps: usize,
    pub train_seconds_per_epoch: Option<f64>,
    pub inference_seconds_per_pass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// What was evaluated, e.g. `flowrec` or `popularity`.
    pub model: String,
    pub split: String,
    pub steps: usize,
    pub overall: Metrics,
    pub groups: Option<GroupMetrics>,
    pub steps_sweep: Vec<SweepEntry>,
    pub timing: Option<Timing>,
    pub config_hash: String,
    pub config: Value,
}

impl EvalReport {
    pub fn new(model: &str, split: &str, steps: usize, overall: Metrics, config: &impl Serialize) -> Self {
        Self {
            model: model.into(),
            split: split.into(),
            steps,
            overall,
            groups: None,
            steps_sweep: Vec::new(),
            timing: None,
            config_hash: crate::config::config_hash(config),
            config: serde_json::to_value(config).expect("config serialises"),
        }
    }

    /// Pretty JSON with every metric as a percentage rounded to 4 decimals.
    pub fn to_pretty_json(&self) -> String {
        let sweep: Vec<Value> = self
            .steps_sweep
            .iter()
            .map(|e| {
                let mut m = e.metrics.percent_json();
                m["steps"] = json!(e.steps);
                m
            })
            .collect();
        let v = json!({
            "model": self.model,
            "split": self.split,
            "steps": self.steps,
            "metrics_unit": "percent",
            "overall": self.overall.percent_json(),
            "groups": self.groups.as_ref().map(GroupMetrics::percent_json),
            "steps_sweep": sweep,
            "timing": self.timing,
            "config_hash": self.config_hash,
            "config": self.config,
        });
        serde_json::to_string_pretty(&v).expect("report serialises")
    }

    pub const CSV_HEADER: &'static str = "model,split,config_hash,steps,users,hr@5,ndcg@5,hr@10,ndcg@10";

    /// One CSV line (no trailing newline) matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let o = &self.overall;
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            self.model,
            self.split,
            self.config_hash,
            self.steps,
            o.users,
            percent(o.hr5),
            percent(o.ndcg5),
            percent(o.hr10),
            percent(o.ndcg10)
        )
    }
}

/// Evaluates once per step count with everything else fixed. `make`
/// builds the recommender for a given `T`.
pub fn steps_sweep<R, F>(grid: &[usize], cases: &[Example], opts: &EvalOptions, mut make: F) -> Result<Vec<SweepEntry>>
where
    R: Recommender,
    F: FnMut(usize) -> R,
{
    grid.iter()
        .map(|&steps| {
            let rec = make(steps);
            Ok(SweepEntry {
                steps,
                metrics: evaluate(&rec, cases, opts)?,
            })
        })
        .collect()
}

/// Mean wall-clock seconds of `passes` full ranking passes over `cases`.
pub fn time_inference<R: Recommender + ?Sized>(rec: &R, cases: &[Example], opts: &EvalOptions, passes: usize) -> Result<f64> {
    let passes = passes.max(1);
    let mut total = 0.0;
    for _ in 0..passes {
        let start = Instant::now();
        ranks(rec, cases, opts)?;
        total += start.elapsed().as_secs_f64();
    }
    Ok(total / passes as f64)
}

/// Training seconds per epoch (from the log) and inference seconds per
/// pass, each averaged over at least three samples.
pub fn timing_report<R: Recommender + ?Sized>(
    rec: &R,
    steps: usize,
    cases: &[Example],
    opts: &EvalOptions,
    epoch_seconds: &[f64],
    passes: usize,
) -> Result<Timing> {
    let train = (!epoch_seconds.is_empty()).then(|| epoch_seconds.iter().sum::<f64>() / epoch_seconds.len() as f64);
    Ok(Timing {
        steps,
        train_seconds_per_epoch: train,
        inference_seconds_per_pass: Some(time_inference(rec, cases, opts, passes.max(3))?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_cases() {
        assert_eq!(hr_at_k(1, 5), 1.0);
        assert_eq!(hr_at_k(6, 5), 0.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
    }

    #[test]
    fn rank_tie_rule() {
        let s = [0.5, 0.5, 0.9, 0.5];
        assert_eq!(rank_of_target(&s, 3), 1);
        assert_eq!(rank_of_target(&s, 1), 2);
        assert_eq!(rank_of_target(&s, 2), 3);
        assert_eq!(rank_of_target(&s, 4), 4);
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(percent(0.059123449), 5.9123);
        assert_eq!(percent(1.0), 100.0);
    }

    struct Fixed(Vec<f64>);
    impl Recommender for Fixed {
        fn num_items(&self) -> usize {
            self.0.len()
        }
        fn max_len(&self) -> usize {
            3
        }
        fn scores(&self, b: &SequenceBatch) -> Result<Matrix> {
            Ok(Matrix::from_rows(&vec![self.0.clone(); b.size()]))
        }
    }

    fn cases(targets: &[u32]) -> Vec<Example> {
        targets
            .iter()
            .enumerate()
            .map(|(u, &t)| Example {
                user: u as u32,
                context: vec![1 + (u as u32 % 3)],
                target: t,
            })
            .collect()
    }

    #[test]
    fn masking_removes_history_but_not_target() {
        let rec = Fixed(vec![0.9, 0.8, 0.1]);
        let c = vec![Example {
            user: 0,
            context: vec![1, 2],
            target: 3,
        }];
        let plain = EvalOptions::default();
        assert_eq!(ranks(&rec, &c, &plain).unwrap(), vec![3]);
        let masked = EvalOptions {
            mask_history: true,
            ..plain
        };
        assert_eq!(ranks(&rec, &c, &masked).unwrap(), vec![1]);
    }

    #[test]
    fn sharding_matches_serial() {
        let rec = Fixed((0..40).map(|i| ((i * 7) % 11) as f64).collect());
        let c = cases(&(1..=40).collect::<Vec<_>>());
        let one = EvalOptions {
            batch_size: 3,
            ..Default::default()
        };
        let four = EvalOptions { workers: 4, ..one };
        let a = evaluate(&rec, &c, &one).unwrap();
        let b = evaluate(&rec, &c, &four).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hr10.to_bits(), b.hr10.to_bits());
    }

    #[test]
    fn report_json_and_csv() {
        let m = Metrics::from_ranks(&[1, 3, 20]);
        let r = EvalReport::new("x", "test", 10, m, &json!({"a": 1}));
        let v: Value = serde_json::from_str(&r.to_pretty_json()).unwrap();
        assert_eq!(v["overall"]["hr@5"], json!(66.6667));
        assert_eq!(v["overall"]["ndcg@10"], json!(50.0));
        assert!(r.csv_row().ends_with(",3,66.6667,50.0000,66.6667,50.0000"));
        assert_eq!(r.csv_row().split(',').count(), EvalReport::CSV_HEADER.split(',').count());
    }

    proptest! {
        #[test]
        fn metric_ordering(ranks in proptest::collection::vec(1usize..60, 1..50)) {
            for &r in &ranks {
                prop_assert!(hr_at_k(r, 5) <= hr_at_k(r, 10));
                prop_assert!(ndcg_at_k(r, 5) <= ndcg_at_k(r, 10));
                prop_assert!(ndcg_at_k(r, 10) <= hr_at_k(r, 10));
            }
            let m = Metrics::from_ranks(&ranks);
            prop_assert!(0.0 <= m.hr5 && m.hr5 <= m.hr10 && m.hr10 <= 1.0);
            prop_assert!(m.ndcg5 <= m.ndcg10 && m.ndcg10 <= m.hr10);
            prop_assert!(m.ndcg5 <= m.hr5);
        }

        #[test]
        fn rank_matches_sort_position(scores in proptest::collection::vec(-3i32..3, 1..30), pick in 0usize..30) {
            let s: Vec<f64> = scores.iter().map(|&x| x as f64).collect();
            let t = pick % s.len();
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            let pos = order.iter().position(|&i| i == t).unwrap() + 1;
            prop_assert_eq!(rank_of_target(&s, t as u32 + 1), pos);
        }
    }
}
