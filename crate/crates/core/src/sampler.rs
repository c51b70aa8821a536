//! Inference: Euler integration of the learned field, catalog scoring,
//! top-k ranking and trajectory export.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{Example, SequenceBatch};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::eval::Recommender;
use crate::flow::inference_field;
use crate::model::FlowRec;
use crate::tensor::Matrix;

/// Runs `x_{i+1} = x_i + f(x_i, i/T) / T` for `i = 0..T`, calling
/// `visit` on every state including `x0` and the result.
pub fn euler_visit<F, V>(x0: &Matrix, steps: usize, mut field: F, mut visit: V) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
    V: FnMut(&Matrix),
{
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let mut x = x0.clone();
    visit(&x);
    let n = steps as f64;
    for i in 0..steps {
        let v = field(&x, i as f64 / n)?;
        if v.shape() != x.shape() {
            return Err(Error::InvalidArgument("field changed the state shape".into()));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += vi / n;
        }
        if !x.is_finite() {
            return Err(Error::Diverged { step: i + 1, steps });
        }
        visit(&x);
    }
    Ok(x)
}

pub fn euler_integrate<F>(x0: &Matrix, steps: usize, field: F) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    euler_visit(x0, steps, field, |_| {})
}

/// Prior states for a batch, in eval mode.
pub fn prior_states(model: &FlowRec, batch: &SequenceBatch) -> Result<Matrix> {
    let mut g = Graph::new();
    let x0 = encode(&mut g, &mut model.bind(), batch, None)?;
    Ok(g.value(x0).clone())
}

/// Integrates the model's field from `x0` with deterministic modulation.
pub fn transport(model: &FlowRec, x0: &Matrix, steps: usize) -> Result<Matrix> {
    euler_integrate(x0, steps, |x, t| Ok(inference_field(model, x, t)))
}

/// Inner product of every state row with every real item embedding.
pub fn score(states: &Matrix, candidates: &Matrix) -> Matrix {
    Matrix::matmul(states, false, candidates, true)
}

/// The `k` best items of one score row as `(dense id, score)`, best first;
/// ties go to the lower id.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!("k must be in 1..={}, got {k}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx.into_iter().map(|i| (i as u32 + 1, scores[i])).collect())
}

/// FlowRec as a [`Recommender`] with a fixed number of sampling steps.
pub struct FlowSampler<'m> {
    pub model: &'m FlowRec,
    pub steps: usize,
    candidates: Matrix,
}

impl<'m> FlowSampler<'m> {
    pub fn new(model: &'m FlowRec, steps: usize) -> Self {
        Self {
            model,
            steps,
            candidates: model.candidate_embeddings(),
        }
    }
}

impl Recommender for FlowSampler<'_> {
    fn num_items(&self) -> usize {
        self.model.num_items()
    }

    fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    fn scores(&self, batch: &SequenceBatch) -> Result<Matrix> {
        let x0 = prior_states(self.model, batch)?;
        let x1 = transport(self.model, &x0, self.steps)?;
        Ok(score(&x1, &self.candidates))
    }
}

/// The states visited while sampling for one user.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub user: u32,
    pub target: u32,
    /// `(T + 1) x d`; row 0 is `x0`, the last row the final estimate.
    pub states: Matrix,
}

pub fn trajectories(model: &FlowRec, cases: &[Example], steps: usize, batch_size: usize) -> Result<Vec<Trajectory>> {
    let mut out = Vec::with_capacity(cases.len());
    let d = model.dim();
    for chunk in cases.chunks(batch_size.max(1)) {
        let batch = SequenceBatch::from_examples(chunk, model.config().max_len);
        let x0 = prior_states(model, &batch)?;
        let mut seen: Vec<Matrix> = Vec::with_capacity(steps + 1);
        transport_visit(model, &x0, steps, |x| seen.push(x.clone()))?;
        for (r, c) in chunk.iter().enumerate() {
            let mut states = Matrix::zeros(steps + 1, d);
            for (i, s) in seen.iter().enumerate() {
                states.row_mut(i).copy_from_slice(s.row(r));
            }
            out.push(Trajectory {
                user: c.user,
                target: c.target,
                states,
            });
        }
    }
    Ok(out)
}

fn transport_visit(model: &FlowRec, x0: &Matrix, steps: usize, visit: impl FnMut(&Matrix)) -> Result<Matrix> {
    euler_visit(x0, steps, |x, t| Ok(inference_field(model, x, t)), visit)
}

/// Writes trajectories as CSV: `user,step,dim_0..dim_{d-1},target_id`,
/// one row per visited state. Values use the shortest round-trip decimal
/// form, so reading the file back is lossless.
pub fn trace_export<W: Write>(trajs: &[Trajectory], dim: usize, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["user".to_string(), "step".to_string()];
    header.extend((0..dim).map(|i| format!("dim_{i}")));
    header.push("target_id".into());
    wr.write_record(&header)?;
    for t in trajs {
        if t.states.cols() != dim {
            return Err(Error::InvalidArgument(format!("trajectory width {} differs from {dim}", t.states.cols())));
        }
        for step in 0..t.states.rows() {
            let mut rec = vec![t.user.to_string(), step.to_string()];
            rec.extend(t.states.row(step).iter().map(|v| v.to_string()));
            rec.push(t.target.to_string());
            wr.write_record(&rec)?;
        }
    }
    wr.flush().map_err(|e| Error::io("<trace>", e))
}

/// Parses a file written by [`trace_export`]. Rows of one trajectory must
/// be contiguous with steps `0, 1, ...`.
pub fn trace_import<R: Read>(r: R) -> Result<Vec<Trajectory>> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    let n = header.len();
    let ok = n >= 3
        && &header[0] == "user"
        && &header[1] == "step"
        && &header[n - 1] == "target_id"
        && (2..n - 1).all(|i| header[i] == *format!("dim_{}", i - 2));
    if !ok {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected trace header".into(),
        });
    }
    let dim = n - 3;
    let mut out: Vec<Trajectory> = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut current: Option<(u32, u32)> = None;
    let flush = |cur: Option<(u32, u32)>, rows: &mut Vec<f64>, out: &mut Vec<Trajectory>| {
        if let Some((user, target)) = cur {
            let data = std::mem::take(rows);
            out.push(Trajectory {
                user,
                target,
                states: Matrix::from_vec(data.len() / dim.max(1), dim, data),
            });
        }
    };
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        if rec.len() != n {
            return Err(bad("wrong number of fields"));
        }
        let user: u32 = rec[0].parse().map_err(|_| bad("bad user"))?;
        let step: usize = rec[1].parse().map_err(|_| bad("bad step"))?;
        let target: u32 = rec[n - 1].parse().map_err(|_| bad("bad target_id"))?;
        if step == 0 {
            flush(current.take(), &mut rows, &mut out);
            current = Some((user, target));
        } else {
            let expected = rows.len() / dim.max(1);
            if current != Some((user, target)) || (dim > 0 && step != expected) {
                return Err(bad("trajectory rows out of order"));
            }
        }
        for f in rec.iter().skip(2).take(dim) {
            rows.push(f.parse().map_err(|_| bad("bad state value"))?);
        }
    }
    flush(current, &mut rows, &mut out);
    Ok(out)
}

/// Top items for one evaluation case, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: String,
    pub target: String,
    pub items: Vec<String>,
    pub scores: Vec<f64>,
}

/// Ranks the catalog for every case and keeps the best `k`. Dense ids are
/// mapped back to raw ids with `user_name` and `item_name`.
pub fn ranked_lists<R: Recommender + ?Sized>(
    rec: &R,
    cases: &[Example],
    k: usize,
    batch_size: usize,
    user_name: impl Fn(u32) -> String,
    item_name: impl Fn(u32) -> String,
) -> Result<Vec<RankedList>> {
    let k = k.min(rec.num_items());
    let mut out = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        let batch = SequenceBatch::from_examples(chunk, rec.max_len());
        let scores = rec.scores(&batch)?;
        for (r, c) in chunk.iter().enumerate() {
            let top = top_k(scores.row(r), k)?;
            out.push(RankedList {
                user: user_name(c.user),
                target: item_name(c.target),
                items: top.iter().map(|&(i, _)| item_name(i)).collect(),
                scores: top.iter().map(|&(_, s)| s).collect(),
            });
        }
    }
    Ok(out)
}

pub fn write_ranked_lists<W: Write>(lists: &[RankedList], mut w: W) -> Result<()> {
    for l in lists {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io("<ranked>", e))?;
    }
    Ok(())
}
