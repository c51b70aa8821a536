//! Flow matching between the behaviour prior `x0` and the target item
//! embedding `x1`.
//!
//! Training draws `t ~ U[0, 1)` per row, forms the straight-line
//! interpolant `x_t = (1 - t) x0 + t x1` and regresses the network field on
//! the constant velocity `x1 - x0`. The single-step estimate
//! `x_t + (1 - t) v` is additionally scored against the catalog.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::config::{CfmReduction, ModulationConfig, ModulationMode, TrainConfig};
use crate::dataset::SequenceBatch;
use crate::encoder::{candidates, catalog_cross_entropy, encode};
use crate::error::{Error, Result};
use crate::model::{Bound, FlowRec};
use crate::rng::{StreamRng, TrainRngs};
use crate::tensor::Matrix;

/// Scale applied to `t` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;
const TIME_BASE: f64 = 10000.0;

/// `(1 - t_r) x0_r + t_r x1_r` for every row `r`.
pub fn interpolate(x0: &Matrix, x1: &Matrix, t: &[f64]) -> Result<Matrix> {
    if x0.shape() != x1.shape() || t.len() != x0.rows() {
        return Err(Error::InvalidArgument("interpolate: shape mismatch".into()));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("time {bad} outside [0, 1]")));
    }
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    for (r, &tr) in t.iter().enumerate() {
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(x0.row(r)).zip(x1.row(r)) {
            *o = (1.0 - tr) * a + tr * b;
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of `t * 1000`: the first half holds sines and the
/// second half cosines at frequencies `10000^(-2i/d)`. An odd last column
/// stays zero.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let s = t * TIME_SCALE;
    for i in 0..half {
        let freq = TIME_BASE.powf(-(2.0 * i as f64) / dim as f64);
        out[i] = (s * freq).sin();
        out[half + i] = (s * freq).cos();
    }
    out
}

/// Draws the per-dimension modulation for a `[rows, cols]` state. For the
/// multiplicative modes this is the factor; for the additive mode it is the
/// offset. `Off` yields `None`.
pub fn sample_modulation<R: Rng + ?Sized>(cfg: &ModulationConfig, rows: usize, cols: usize, rng: &mut R) -> Option<Matrix> {
    let mean = match cfg.mode {
        ModulationMode::Off => return None,
        ModulationMode::UnitMeanMult => 1.0,
        ModulationMode::LiteralMult | ModulationMode::Additive => cfg.delta,
    };
    let normal = Normal::new(mean, cfg.delta.sqrt()).expect("delta validated positive");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Some(Matrix::from_vec(rows, cols, data))
}

/// Modulation at inference: the noise is replaced by its mean, so ranking
/// is deterministic.
pub fn mean_modulation(cfg: &ModulationConfig, x: &Matrix) -> Matrix {
    match cfg.mode {
        ModulationMode::Off | ModulationMode::UnitMeanMult => x.clone(),
        ModulationMode::LiteralMult => x.map(|v| v * cfg.delta),
        ModulationMode::Additive => x.map(|v| v + cfg.delta),
    }
}

fn modulate(g: &mut Graph, cfg: &ModulationConfig, x: Var, noise: Option<Matrix>) -> Var {
    match (cfg.mode, noise) {
        (ModulationMode::Additive, Some(n)) => g.add_const(x, &n),
        (_, Some(n)) => g.mul_const(x, n),
        (_, None) => x,
    }
}

fn time_embedding(g: &mut Graph, bound: &mut Bound<'_>, t: &[f64]) -> Var {
    let d = bound.model().dim();
    match bound.model().layout().flow.time {
        None => {
            let rows: Vec<Vec<f64>> = t.iter().map(|&ti| sinusoidal_embedding(ti, d)).collect();
            g.constant(Matrix::from_rows(&rows))
        }
        Some((w, b)) => {
            let col = g.constant(Matrix::from_vec(t.len(), 1, t.to_vec()));
            let wv = bound.var(g, w);
            let bv = bound.var(g, b);
            let y = g.matmul(col, false, wv, false);
            g.add_row_bias(y, bv)
        }
    }
}

/// The vector field network `f(x, t)`: a two-layer GELU MLP over the
/// concatenation of the (already modulated) state and the time embedding.
pub fn field(g: &mut Graph, bound: &mut Bound<'_>, x: Var, t: &[f64]) -> Var {
    let ids = bound.model().layout().flow.clone();
    let te = time_embedding(g, bound, t);
    let h = g.concat_cols(x, te);
    let (w1, b1) = (bound.var(g, ids.w1), bound.var(g, ids.b1));
    let h = g.matmul(h, false, w1, false);
    let h = g.add_row_bias(h, b1);
    let h = g.gelu(h);
    let (w2, b2) = (bound.var(g, ids.w2), bound.var(g, ids.b2));
    let h = g.matmul(h, false, w2, false);
    g.add_row_bias(h, b2)
}

/// Evaluates the field with deterministic modulation. `x` is `[B, d]`.
pub fn inference_field(model: &FlowRec, x: &Matrix, t: f64) -> Matrix {
    let mut g = Graph::new();
    let mut bound = model.bind();
    let xm = g.constant(mean_modulation(&model.config().modulation, x));
    let v = field(&mut g, &mut bound, xm, &vec![t; x.rows()]);
    g.value(v).clone()
}

/// `x_t + (1 - t) v`, row-wise.
pub fn single_step_estimate(x_t: &Matrix, v: &Matrix, t: &[f64]) -> Matrix {
    let mut out = x_t.clone();
    for (r, &tr) in t.iter().enumerate() {
        for (o, vi) in out.row_mut(r).iter_mut().zip(v.row(r)) {
            *o += (1.0 - tr) * vi;
        }
    }
    out
}

/// Mean over rows of `||v - (x1 - x0)||^2`.
pub fn cfm_loss(v: &Matrix, x0: &Matrix, x1: &Matrix) -> f64 {
    let rows = v.rows();
    let total: f64 = (0..rows)
        .map(|r| {
            v.row(r)
                .iter()
                .zip(x0.row(r))
                .zip(x1.row(r))
                .map(|((vi, a), b)| (vi - (b - a)).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / rows as f64
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub prior: f64,
    pub cfm: f64,
    pub align: f64,
    pub total: f64,
}

/// Random inputs of one training step, drawn up front so a step can be
/// replayed exactly.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub t: Vec<f64>,
    pub modulation: Option<Matrix>,
}

impl StepNoise {
    pub fn draw(model: &FlowRec, rows: usize, rngs: &mut TrainRngs) -> Self {
        let t = (0..rows).map(|_| rngs.time.random::<f64>()).collect();
        let modulation = sample_modulation(&model.config().modulation, rows, model.dim(), &mut rngs.modulation);
        Self { t, modulation }
    }
}

/// Builds the joint objective for one batch and returns the scalar to
/// differentiate. Terms that are disabled or carry zero weight are not
/// built at all and report 0.
pub fn training_loss(
    g: &mut Graph,
    bound: &mut Bound<'_>,
    batch: &SequenceBatch,
    train: &TrainConfig,
    noise: StepNoise,
    dropout: Option<&mut StreamRng>,
) -> Result<(Var, LossParts)> {
    let use_prior = train.use_prior_loss;
    let use_cfm = train.use_cfm_loss && train.alpha > 0.0;
    let use_align = train.use_align_loss && train.beta > 0.0;
    if !(use_prior || use_cfm || use_align) {
        return Err(Error::NoActiveLoss);
    }
    if noise.t.len() != batch.size() {
        return Err(Error::InvalidArgument("time samples do not match batch size".into()));
    }
    let mod_cfg = bound.model().config().modulation;
    let x0 = encode(g, bound, batch, dropout)?;
    let cands = candidates(g, bound);
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if use_prior {
        let prior = catalog_cross_entropy(g, x0, cands, &batch.targets)?;
        parts.prior = g.value(prior).item();
        terms.push((prior, 1.0, "prior"));
    }
    if use_cfm || use_align {
        let items = bound.model().layout().items;
        let table = bound.var(g, items);
        let x1 = g.gather(table, batch.targets.iter().map(|&i| i as usize).collect());
        let one_minus: Vec<f64> = noise.t.iter().map(|t| 1.0 - t).collect();
        let a = g.scale_rows(x0, one_minus.clone());
        let b = g.scale_rows(x1, noise.t.clone());
        let x_t = g.add(a, b);
        let xm = modulate(g, &mod_cfg, x_t, noise.modulation);
        let v = field(g, bound, xm, &noise.t);
        if use_cfm {
            let u = g.sub(x1, x0);
            let diff = g.sub(v, u);
            let mut cfm = g.mean_row_squared_norm(diff);
            if train.cfm_reduction == CfmReduction::Mean {
                let d = g.value(diff).cols() as f64;
                cfm = g.scale(cfm, 1.0 / d);
            }
            parts.cfm = g.value(cfm).item();
            terms.push((cfm, train.alpha, "cfm"));
        }
        if use_align {
            let step = g.scale_rows(v, one_minus);
            let est = g.add(x_t, step);
            let align = catalog_cross_entropy(g, est, cands, &batch.targets)?;
            parts.align = g.value(align).item();
            terms.push((align, train.beta, "align"));
        }
    }
    let mut total: Option<Var> = None;
    for (term, w, name) in terms {
        let value = g.value(term).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: name,
                value,
                step: 0,
            });
        }
        let term = if w == 1.0 { term } else { g.scale(term, w) };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    let total = total.expect("at least one term is active");
    parts.total = g.value(total).item();
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "total",
            value: parts.total,
            step: 0,
        });
    }
    Ok((total, parts))
}
