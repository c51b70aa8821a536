//! Parameter layout of the full model: tied item embeddings, the sequence
//! encoder and the flow network.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, Var};
use crate::config::{EncoderKind, ModelConfig, TimeEmbeddingKind};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TransformerIds {
    pub positions: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GruIds {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum EncoderIds {
    Transformer(TransformerIds),
    Gru(GruIds),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FlowIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Learned time embedding `t -> t * w + b`, when configured.
    pub time: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub items: ParamId,
    pub encoder: EncoderIds,
    pub flow: FlowIds,
}

/// Shape metadata needed to rebuild a model from its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub num_items: usize,
}

/// The trainable model. Item ids are dense in `1..=num_items`; row 0 of
/// the embedding table is the pad embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRec {
    spec: ModelSpec,
    params: ParamStore,
    layout: Layout,
}

/// Expected parameter shapes, in creation order.
fn shapes(cfg: &ModelConfig, num_items: usize) -> Vec<(String, usize, usize)> {
    let d = cfg.dim;
    let mut out = vec![("item_embedding".to_string(), num_items + 1, d)];
    match cfg.encoder {
        EncoderKind::Transformer => {
            out.push(("position_embedding".into(), cfg.max_len, d));
            let inner = cfg.ffn_mult * d;
            for l in 0..cfg.layers {
                let p = |n: &str| format!("block{l}.{n}");
                out.extend([
                    (p("ln1.gain"), 1, d),
                    (p("ln1.bias"), 1, d),
                    (p("attn.wq"), d, d),
                    (p("attn.bq"), 1, d),
                    (p("attn.wk"), d, d),
                    (p("attn.bk"), 1, d),
                    (p("attn.wv"), d, d),
                    (p("attn.bv"), 1, d),
                    (p("attn.wo"), d, d),
                    (p("attn.bo"), 1, d),
                    (p("ln2.gain"), 1, d),
                    (p("ln2.bias"), 1, d),
                    (p("ffn.w1"), d, inner),
                    (p("ffn.b1"), 1, inner),
                    (p("ffn.w2"), inner, d),
                    (p("ffn.b2"), 1, d),
                ]);
            }
            out.push(("final_ln.gain".into(), 1, d));
            out.push(("final_ln.bias".into(), 1, d));
        }
        EncoderKind::Gru => out.extend([
            ("gru.w_ih".to_string(), d, 3 * d),
            ("gru.w_hh".to_string(), d, 3 * d),
            ("gru.b_ih".to_string(), 1, 3 * d),
            ("gru.b_hh".to_string(), 1, 3 * d),
        ]),
    }
    let h = cfg.flow_hidden();
    out.extend([
        ("flow.w1".to_string(), 2 * d, h),
        ("flow.b1".to_string(), 1, h),
        ("flow.w2".to_string(), h, d),
        ("flow.b2".to_string(), 1, d),
    ]);
    if cfg.time_embedding == TimeEmbeddingKind::Learned {
        out.push(("flow.time.w".into(), 1, d));
        out.push(("flow.time.b".into(), 1, d));
    }
    out
}

fn resolve(cfg: &ModelConfig, params: &ParamStore) -> Result<Layout> {
    let id = |name: &str| {
        params
            .id(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {name}")))
    };
    let encoder = match cfg.encoder {
        EncoderKind::Transformer => {
            let mut blocks = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let p = |n: &str| id(&format!("block{l}.{n}"));
                blocks.push(BlockIds {
                    ln1_gain: p("ln1.gain")?,
                    ln1_bias: p("ln1.bias")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_gain: p("ln2.gain")?,
                    ln2_bias: p("ln2.bias")?,
                    w1: p("ffn.w1")?,
                    b1: p("ffn.b1")?,
                    w2: p("ffn.w2")?,
                    b2: p("ffn.b2")?,
                });
            }
            EncoderIds::Transformer(TransformerIds {
                positions: id("position_embedding")?,
                blocks,
                final_gain: id("final_ln.gain")?,
                final_bias: id("final_ln.bias")?,
            })
        }
        EncoderKind::Gru => EncoderIds::Gru(GruIds {
            w_ih: id("gru.w_ih")?,
            w_hh: id("gru.w_hh")?,
            b_ih: id("gru.b_ih")?,
            b_hh: id("gru.b_hh")?,
        }),
    };
    let time = match cfg.time_embedding {
        TimeEmbeddingKind::Learned => Some((id("flow.time.w")?, id("flow.time.b")?)),
        TimeEmbeddingKind::Sinusoidal => None,
    };
    Ok(Layout {
        items: id("item_embedding")?,
        encoder,
        flow: FlowIds {
            w1: id("flow.w1")?,
            b1: id("flow.b1")?,
            w2: id("flow.w2")?,
            b2: id("flow.b2")?,
            time,
        },
    })
}

impl FlowRec {
    /// Fresh model. Weight matrices and embeddings are drawn from a normal
    /// with `init_std` truncated at two standard deviations; biases start
    /// at zero and layer-norm gains at one.
    pub fn new(config: &ModelConfig, num_items: usize, rng: &mut StreamRng) -> Result<Self> {
        if num_items == 0 {
            return Err(Error::InvalidArgument("model needs at least one item".into()));
        }
        if config.dim % config.heads != 0 {
            return Err(Error::Config("dim must be a multiple of heads".into()));
        }
        let mut params = ParamStore::new();
        for (name, rows, cols) in shapes(config, num_items) {
            let value = if name.ends_with(".gain") {
                Matrix::filled(rows, cols, 1.0)
            } else if rows == 1 && !name.ends_with("time.w") {
                Matrix::zeros(rows, cols)
            } else {
                truncated_normal(rows, cols, config.init_std, rng)
            };
            params.add(name, value);
        }
        Self::from_params(config.clone(), num_items, params)
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(config: ModelConfig, num_items: usize, params: ParamStore) -> Result<Self> {
        let expected = shapes(&config, num_items);
        if expected.len() != params.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, rows, cols) in &expected {
            let id = params
                .id(name)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing parameter {name}")))?;
            let got = params.get(id).shape();
            if got != (*rows, *cols) {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "parameter {name} has shape {got:?}, expected {:?}",
                    (rows, cols)
                )));
            }
        }
        let layout = resolve(&config, &params)?;
        Ok(Self {
            spec: ModelSpec { config, num_items },
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.config
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_items(&self) -> usize {
        self.spec.num_items
    }

    pub fn dim(&self) -> usize {
        self.spec.config.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The embedding table including the pad row.
    pub fn item_embeddings(&self) -> &Matrix {
        self.params.get(self.layout.items)
    }

    /// Embeddings of the real items only (rows `1..=num_items`).
    pub fn candidate_embeddings(&self) -> Matrix {
        let t = self.item_embeddings();
        t.slice_rows(1, t.rows())
    }

    pub fn bind(&self) -> Bound<'_> {
        Bound {
            model: self,
            vars: vec![None; self.params.len()],
        }
    }
}

/// Lazily places parameters on a [`Graph`], once each.
pub struct Bound<'m> {
    model: &'m FlowRec,
    vars: Vec<Option<Var>>,
}

impl<'m> Bound<'m> {
    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = g.param(id, self.model.params.get(id).clone());
        self.vars[id] = Some(v);
        v
    }

    pub fn model(&self) -> &'m FlowRec {
        self.model
    }
}
