//! Run configuration.
//!
//! A run is described by one TOML document. Every section and key is
//! optional and defaults to the reference setup (d = 128, 4 layers, 4
//! heads, batch 512, Adam at 0.005, patience 10, 10 sampling steps).
//! Unknown keys are rejected.
//!
//! ```toml
//! seed = 42
//! output_dir = "runs"
//!
//! [data]
//! path = "ml-1m/ratings.dat"
//! format = "movielens_dat"
//!
//! [model]
//! dim = 128
//! encoder = "transformer"
//!
//! [model.modulation]
//! mode = "unit_mean_mult"
//! delta = 0.001
//!
//! [train]
//! alpha = 10.0
//! beta = 2.0
//!
//! [sampler]
//! steps = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::synthetic::MarkovCorpus;
use crate::dataset::InputFormat;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub format: InputFormat,
    /// Fail on malformed rows instead of skipping them.
    pub strict: bool,
    pub min_count: usize,
    /// Repeat k-core removal until nothing changes.
    pub iterative_filter: bool,
    /// Use every prefix of the training portion as a training pair instead
    /// of only the final one.
    pub all_prefixes: bool,
    /// Generate a Markov corpus instead of reading `path`.
    pub synthetic: Option<MarkovCorpus>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: InputFormat::Tsv,
            strict: true,
            min_count: 5,
            iterative_filter: true,
            all_prefixes: false,
            synthetic: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Transformer,
    Gru,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbeddingKind {
    #[default]
    Sinusoidal,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationMode {
    /// `lambda_i ~ N(1, delta)`, multiplied into the interpolant.
    #[default]
    UnitMeanMult,
    /// `lambda_i ~ N(delta, delta)`, multiplied into the interpolant.
    LiteralMult,
    /// `x_t + eps` with `eps_i ~ N(delta, delta)`.
    Additive,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    /// Variance of the per-dimension Gaussian (and its mean in the literal
    /// and additive modes).
    pub delta: f64,
    pub mode: ModulationMode,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            delta: 0.001,
            mode: ModulationMode::UnitMeanMult,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub encoder: EncoderKind,
    pub embed_dropout: f64,
    pub hidden_dropout: f64,
    /// Feed-forward inner width as a multiple of `dim`.
    pub ffn_mult: usize,
    /// Hidden width of the flow MLP; `None` means `2 * dim`.
    pub flow_hidden: Option<usize>,
    pub time_embedding: TimeEmbeddingKind,
    pub init_std: f64,
    pub modulation: ModulationConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 4,
            heads: 4,
            max_len: 50,
            encoder: EncoderKind::Transformer,
            embed_dropout: 0.1,
            hidden_dropout: 0.3,
            ffn_mult: 4,
            flow_hidden: None,
            time_embedding: TimeEmbeddingKind::Sinusoidal,
            init_std: 0.02,
            modulation: ModulationConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn flow_hidden(&self) -> usize {
        self.flow_hidden.unwrap_or(2 * self.dim)
    }
}

/// How the flow-matching squared error is reduced over the `d`
/// coordinates of each row (rows are always averaged).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CfmReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the flow-matching regression loss.
    pub alpha: f64,
    /// Weight of the single-step alignment loss.
    pub beta: f64,
    pub cfm_reduction: CfmReduction,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub use_prior_loss: bool,
    pub use_cfm_loss: bool,
    pub use_align_loss: bool,
    /// Global L2 gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Worker threads for validation ranking.
    pub eval_workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 2.0,
            cfm_reduction: CfmReduction::Sum,
            lr: 0.005,
            batch_size: 512,
            patience: 10,
            max_epochs: 100,
            use_prior_loss: true,
            use_cfm_loss: true,
            use_align_loss: true,
            grad_clip: None,
            eval_workers: 1,
        }
    }
}

/// Grid searched for `alpha` by `sweep`.
pub const ALPHA_GRID: [f64; 4] = [5.0, 10.0, 15.0, 20.0];
/// Grid searched for `beta` by `sweep`.
pub const BETA_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];
/// Sampling-step grid.
pub const STEPS_GRID: [usize; 8] = [1, 5, 10, 15, 20, 25, 30, 35];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Exclude already-seen items from the ranking. Off for benchmark runs.
    pub mask_history: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            mask_history: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0 {
            return fail(format!("model.dim ({}) must be a positive multiple of model.heads ({})", m.dim, m.heads));
        }
        if m.max_len == 0 {
            return fail("model.max_len must be positive".into());
        }
        for (name, p) in [("embed_dropout", m.embed_dropout), ("hidden_dropout", m.hidden_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("model.{name} must be in [0, 1)"));
            }
        }
        if m.modulation.mode != ModulationMode::Off && !(m.modulation.delta > 0.0) {
            return fail("model.modulation.delta must be positive".into());
        }
        let t = &self.train;
        if !(t.alpha >= 0.0 && t.beta >= 0.0) {
            return fail("train.alpha and train.beta must be non-negative".into());
        }
        if t.batch_size == 0 || t.eval_workers == 0 {
            return fail("train.batch_size and train.eval_workers must be positive".into());
        }
        if !(t.lr > 0.0) {
            return fail("train.lr must be positive".into());
        }
        if self.sampler.steps == 0 {
            return fail("sampler.steps must be at least 1".into());
        }
        if self.data.min_count == 0 {
            return fail("data.min_count must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}
