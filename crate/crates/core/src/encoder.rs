//! Behaviour encoder: item-id context to prior state `x0`.
//!
//! The default backend is a pre-norm bidirectional Transformer with learned
//! positions; a GRU backend is available for comparison. Both read
//! left-padded batches and return the hidden state of the last (most
//! recent) position of each row.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::dataset::SequenceBatch;
use crate::error::{Error, Result};
use crate::model::{Bound, EncoderIds, GruIds, TransformerIds};
use crate::rng::StreamRng;
use crate::tensor::Matrix;

/// Applies inverted dropout when `rng` is present and `p > 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut StreamRng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let (r, c) = g.value(x).shape();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..r * c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Matrix::from_vec(r, c, mask))
}

fn check_ids(batch: &SequenceBatch, table_rows: usize) -> Result<()> {
    if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= table_rows) {
        return Err(Error::InvalidArgument(format!(
            "item id {bad} out of range for an embedding table with {table_rows} rows"
        )));
    }
    if let Some(&bad) = batch.lengths.iter().find(|&&l| l == 0 || l > batch.max_len) {
        return Err(Error::InvalidArgument(format!("sequence length {bad} outside 1..={}", batch.max_len)));
    }
    Ok(())
}

/// Item embeddings plus (for the Transformer) learned positions:
/// `out[b * L + l] = table[ids[b, l]] + pos[l]`, followed by embedding
/// dropout in training mode.
pub fn embed(g: &mut Graph, bound: &mut Bound<'_>, batch: &SequenceBatch, rng: Option<&mut StreamRng>) -> Result<Var> {
    let model = bound.model();
    let layout = model.layout().clone();
    let p = model.config().embed_dropout;
    check_ids(batch, model.item_embeddings().rows())?;
    let table = bound.var(g, layout.items);
    let tokens = g.gather(table, batch.ids.iter().map(|&i| i as usize).collect());
    let x = match &layout.encoder {
        EncoderIds::Transformer(t) => {
            if batch.max_len != model.config().max_len {
                return Err(Error::InvalidArgument(format!(
                    "batch width {} differs from model max_len {}",
                    batch.max_len,
                    model.config().max_len
                )));
            }
            let pos = bound.var(g, t.positions);
            let idx = (0..batch.size()).flat_map(|_| 0..batch.max_len).collect();
            let pos_rows = g.gather(pos, idx);
            g.add(tokens, pos_rows)
        }
        EncoderIds::Gru(_) => tokens,
    };
    Ok(dropout(g, x, p, rng))
}

fn linear(g: &mut Graph, bound: &mut Bound<'_>, x: Var, w: usize, b: usize) -> Var {
    let wv = bound.var(g, w);
    let bv = bound.var(g, b);
    let y = g.matmul(x, false, wv, false);
    g.add_row_bias(y, bv)
}

fn transformer(
    g: &mut Graph,
    bound: &mut Bound<'_>,
    ids: &TransformerIds,
    batch: &SequenceBatch,
    mut rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let cfg = bound.model().config().clone();
    let mut x = embed(g, bound, batch, rng.as_deref_mut())?;
    for blk in &ids.blocks {
        let (lg, lb) = (bound.var(g, blk.ln1_gain), bound.var(g, blk.ln1_bias));
        let h = g.layer_norm(x, lg, lb);
        let q = linear(g, bound, h, blk.wq, blk.bq);
        let k = linear(g, bound, h, blk.wk, blk.bk);
        let v = linear(g, bound, h, blk.wv, blk.bv);
        let a = g.attention(q, k, v, batch.max_len, cfg.heads, batch.lengths.clone());
        let o = linear(g, bound, a, blk.wo, blk.bo);
        let o = dropout(g, o, cfg.hidden_dropout, rng.as_deref_mut());
        x = g.add(x, o);

        let (lg, lb) = (bound.var(g, blk.ln2_gain), bound.var(g, blk.ln2_bias));
        let h = g.layer_norm(x, lg, lb);
        let f = linear(g, bound, h, blk.w1, blk.b1);
        let f = g.gelu(f);
        let f = linear(g, bound, f, blk.w2, blk.b2);
        let f = dropout(g, f, cfg.hidden_dropout, rng.as_deref_mut());
        x = g.add(x, f);
    }
    let last: Vec<usize> = (0..batch.size()).map(|b| b * batch.max_len + batch.max_len - 1).collect();
    let x = g.gather(x, last);
    let (fg, fb) = (bound.var(g, ids.final_gain), bound.var(g, ids.final_bias));
    Ok(g.layer_norm(x, fg, fb))
}

/// One GRU cell, `h' = (1 - z) * n + z * h` with reset gate applied to the
/// recurrent candidate term.
pub(crate) fn gru_cell(g: &mut Graph, bound: &mut Bound<'_>, ids: &GruIds, x: Var, h: Var) -> Var {
    let d = g.value(h).cols();
    let gi = linear(g, bound, x, ids.w_ih, ids.b_ih);
    let gh = linear(g, bound, h, ids.w_hh, ids.b_hh);
    let gate = |g: &mut Graph, k: usize| {
        let a = g.slice_cols(gi, k * d, (k + 1) * d);
        let b = g.slice_cols(gh, k * d, (k + 1) * d);
        (a, b)
    };
    let (ir, hr) = gate(g, 0);
    let (iz, hz) = gate(g, 1);
    let (inn, hn) = gate(g, 2);
    let r = g.add(ir, hr);
    let r = g.sigmoid(r);
    let z = g.add(iz, hz);
    let z = g.sigmoid(z);
    let rh = g.mul(r, hn);
    let n = g.add(inn, rh);
    let n = g.tanh(n);
    let hmn = g.sub(h, n);
    let zh = g.mul(z, hmn);
    g.add(n, zh)
}

fn gru(g: &mut Graph, bound: &mut Bound<'_>, ids: &GruIds, batch: &SequenceBatch, mut rng: Option<&mut StreamRng>) -> Result<Var> {
    let cfg = bound.model().config().clone();
    let x = embed(g, bound, batch, rng.as_deref_mut())?;
    let (bsz, l) = (batch.size(), batch.max_len);
    let mut h = g.constant(Matrix::zeros(bsz, cfg.dim));
    let longest = batch.lengths.iter().copied().max().unwrap_or(0);
    for pos in l - longest..l {
        let xt = g.gather(x, (0..bsz).map(|b| b * l + pos).collect());
        let next = gru_cell(g, bound, ids, xt, h);
        let mask = batch.lengths.iter().map(|&len| pos >= l - len).collect();
        h = g.row_select(next, h, mask);
    }
    Ok(h)
}

/// Prior states `x0`, one row per batch row. Passing `rng` enables dropout
/// (training mode).
pub fn encode(g: &mut Graph, bound: &mut Bound<'_>, batch: &SequenceBatch, rng: Option<&mut StreamRng>) -> Result<Var> {
    if batch.size() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let ids = bound.model().layout().encoder.clone();
    match &ids {
        EncoderIds::Transformer(t) => transformer(g, bound, t, batch, rng),
        EncoderIds::Gru(r) => gru(g, bound, r, batch, rng),
    }
}

/// Full-catalog softmax cross-entropy of `states · candidates^T` against
/// dense `targets` (1-based). `candidates` holds the real-item rows only,
/// so the pad row never enters the denominator.
pub fn catalog_cross_entropy(g: &mut Graph, states: Var, candidates: Var, targets: &[u32]) -> Result<Var> {
    let n = g.value(candidates).rows();
    let idx = targets
        .iter()
        .map(|&t| {
            if t == 0 || t as usize > n {
                Err(Error::InvalidArgument(format!("target {t} is not a real item id (1..={n})")))
            } else {
                Ok(t as usize - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = g.matmul(states, false, candidates, true);
    Ok(g.softmax_cross_entropy(logits, idx))
}

/// Rows `1..=num_items` of the tied embedding table, as a graph node.
pub fn candidates(g: &mut Graph, bound: &mut Bound<'_>) -> Var {
    let items = bound.model().layout().items;
    let n = bound.model().num_items();
    let table = bound.var(g, items);
    g.gather(table, (1..=n).collect())
}

/// Behaviour-prior loss: mean cross-entropy of `x0` against the next item.
pub fn prior_loss(g: &mut Graph, bound: &mut Bound<'_>, x0: Var, targets: &[u32]) -> Result<Var> {
    let c = candidates(g, bound);
    catalog_cross_entropy(g, x0, c, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderKind, ModelConfig};
    use crate::dataset::Example;
    use crate::model::FlowRec;
    use crate::rng::stream;

    fn tiny(encoder: EncoderKind) -> FlowRec {
        let cfg = ModelConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 5,
            encoder,
            init_std: 0.5,
            ..Default::default()
        };
        FlowRec::new(&cfg, 9, &mut stream(3, "init")).unwrap()
    }

    fn batch(contexts: &[Vec<u32>]) -> SequenceBatch {
        let ex: Vec<_> = contexts
            .iter()
            .enumerate()
            .map(|(u, c)| Example {
                user: u as u32,
                context: c.clone(),
                target: 1,
            })
            .collect();
        SequenceBatch::from_examples(&ex, 5)
    }

    fn x0(model: &FlowRec, b: &SequenceBatch) -> Matrix {
        let mut g = Graph::new();
        let mut bound = model.bind();
        let v = encode(&mut g, &mut bound, b, None).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn pad_content_does_not_reach_x0() {
        for kind in [EncoderKind::Transformer, EncoderKind::Gru] {
            let mut m = tiny(kind);
            let b = batch(&[vec![3, 4], vec![1, 2, 3, 4, 5], vec![7]]);
            let before = x0(&m, &b);
            let id = m.params().id("item_embedding").unwrap();
            for v in m.params_mut().get_mut(id).row_mut(0) {
                *v = 123.0;
            }
            assert_eq!(x0(&m, &b), before, "{kind:?}");
        }
    }

    #[test]
    fn rows_do_not_interact() {
        let m = tiny(EncoderKind::Transformer);
        let both = x0(&m, &batch(&[vec![3, 4], vec![5, 6, 7]]));
        let alone = x0(&m, &batch(&[vec![5, 6, 7]]));
        assert_eq!(both.row(1), alone.row(0));
    }

    #[test]
    fn shape_and_eval_determinism() {
        let m = tiny(EncoderKind::Transformer);
        let b = batch(&[vec![1], vec![2, 3], vec![4, 5, 6, 7, 8]]);
        let a = x0(&m, &b);
        assert_eq!(a.shape(), (3, 8));
        assert!(a.is_finite());
        assert_eq!(a, x0(&m, &b));
    }

    #[test]
    fn embed_matches_index_loop() {
        let m = tiny(EncoderKind::Transformer);
        let b = batch(&[vec![2, 9, 4], vec![1]]);
        let mut g = Graph::new();
        let mut bound = m.bind();
        let e = embed(&mut g, &mut bound, &b, None).unwrap();
        let out = g.value(e).clone();
        let table = m.item_embeddings();
        let pos = m.params().get(m.params().id("position_embedding").unwrap());
        for r in 0..2 {
            for l in 0..5 {
                let id = b.row(r)[l] as usize;
                for j in 0..8 {
                    assert_eq!(out.get(r * 5 + l, j), table.get(id, j) + pos.get(l, j));
                }
            }
        }
    }

    #[test]
    fn all_pad_rows_embed_to_pad_plus_position() {
        let m = tiny(EncoderKind::Transformer);
        let b = SequenceBatch {
            ids: vec![0; 5],
            max_len: 5,
            lengths: vec![1],
            targets: vec![1],
            users: vec![0],
        };
        let mut g = Graph::new();
        let mut bound = m.bind();
        let e = embed(&mut g, &mut bound, &b, None).unwrap();
        let pos = m.params().get(m.params().id("position_embedding").unwrap());
        for l in 0..5 {
            for j in 0..8 {
                assert_eq!(g.value(e).get(l, j), m.item_embeddings().get(0, j) + pos.get(l, j));
            }
        }
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let m = tiny(EncoderKind::Transformer);
        let b = batch(&[vec![10]]);
        let mut g = Graph::new();
        assert!(matches!(encode(&mut g, &mut m.bind(), &b, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn training_mode_dropout_changes_output() {
        let m = tiny(EncoderKind::Transformer);
        let b = batch(&[vec![1, 2, 3]]);
        let mut g = Graph::new();
        let mut rng = stream(1, "dropout");
        let v = encode(&mut g, &mut m.bind(), &b, Some(&mut rng)).unwrap();
        assert_ne!(g.value(v), &x0(&m, &b));
    }

    #[test]
    fn gru_zero_input_zero_bias_gives_zero_state() {
        let mut m = tiny(EncoderKind::Gru);
        for name in ["item_embedding", "gru.b_ih", "gru.b_hh"] {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let s = x0(&m, &batch(&[vec![1, 2, 3]]));
        assert!(s.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gru_single_step_matches_cell_formula() {
        let m = tiny(EncoderKind::Gru);
        let s = x0(&m, &batch(&[vec![4]]));
        let p = m.params();
        let get = |n: &str| p.get(p.id(n).unwrap());
        let (wi, bi, bh) = (get("gru.w_ih"), get("gru.b_ih"), get("gru.b_hh"));
        let x = m.item_embeddings().row(4);
        let d = 8;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..d {
            let pre = |k: usize| (0..d).map(|i| x[i] * wi.get(i, k * d + j)).sum::<f64>() + bi.get(0, k * d + j);
            // h_prev = 0, so the recurrent terms reduce to their biases.
            let r = sig(pre(0) + bh.get(0, j));
            let z = sig(pre(1) + bh.get(0, d + j));
            let n = (pre(2) + r * bh.get(0, 2 * d + j)).tanh();
            let want = (1.0 - z) * n;
            assert!((s.get(0, j) - want).abs() < 1e-12, "{} vs {want}", s.get(0, j));
        }
    }

    #[test]
    fn prior_loss_single_item_is_zero_and_uniform_is_log_n() {
        let cfg = ModelConfig {
            dim: 4,
            layers: 1,
            heads: 1,
            max_len: 3,
            ..Default::default()
        };
        let one = FlowRec::new(&cfg, 1, &mut stream(0, "init")).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]));
        let l = prior_loss(&mut g, &mut one.bind(), x, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let four = FlowRec::new(&cfg, 4, &mut stream(0, "init")).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(1, 4));
        let l = prior_loss(&mut g, &mut four.bind(), x, &[3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        let mut g = Graph::new();
        let x = g.constant(Matrix::zeros(1, 4));
        assert!(prior_loss(&mut g, &mut four.bind(), x, &[0]).is_err());
    }
}
