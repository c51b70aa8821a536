//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FLOWRECK"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    8*N   tensor payload, f64 little-endian, row-major
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! The header holds the full run config and its hash, the model shape,
//! and a tensor directory of `{name, rows, cols, offset}` entries where
//! `offset` counts f64 values from the start of the payload. Training
//! checkpoints additionally carry the random generator states, progress
//! and per-tensor Adam step counts; their Adam moments and best-epoch
//! parameters are stored as extra tensors named `adam.m/<param>`,
//! `adam.v/<param>` and `best/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{FlowRec, ModelSpec};
use crate::optim::{Adam, Moments};
use crate::params::ParamStore;
use crate::rng::TrainRngs;
use crate::tensor::Matrix;
use crate::trainer::{TrainProgress, TrainState, TrainingParts};

pub const MAGIC: &[u8; 8] = b"FLOWRECK";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const TRAILER: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainingHeader {
    lr: f64,
    adam_steps: Vec<Option<u64>>,
    rngs: TrainRngs,
    progress: TrainProgress,
    has_best: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    config: RunConfig,
    model: ModelSpec,
    training: Option<TrainingHeader>,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint. `training` is absent for model-only files.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: FlowRec,
    pub training: Option<TrainingParts>,
}

impl Checkpoint {
    pub fn into_state(self) -> Result<TrainState> {
        let training = self
            .training
            .ok_or_else(|| Error::IncompatibleCheckpoint("checkpoint holds no training state".into()))?;
        Ok(TrainState {
            model: self.model,
            training,
        })
    }

    /// Fails unless the stored model matches `config` and `num_items`.
    pub fn check_compatible(&self, config: &crate::config::ModelConfig, num_items: usize) -> Result<()> {
        let spec = self.model.spec();
        if spec.num_items != num_items {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint has {} items, dataset has {num_items}",
                spec.num_items
            )));
        }
        if &spec.config != config {
            let mut diff = Vec::new();
            let (a, b) = (&spec.config, config);
            if a.dim != b.dim {
                diff.push(format!("dim {} vs {}", a.dim, b.dim));
            }
            if a.layers != b.layers {
                diff.push(format!("layers {} vs {}", a.layers, b.layers));
            }
            if a.encoder != b.encoder {
                diff.push(format!("encoder {:?} vs {:?}", a.encoder, b.encoder));
            }
            if diff.is_empty() {
                diff.push("model settings differ".into());
            }
            return Err(Error::IncompatibleCheckpoint(diff.join(", ")));
        }
        Ok(())
    }
}

struct Payload {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl Payload {
    fn push(&mut self, name: String, m: &Matrix) {
        self.entries.push(TensorEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset: self.data.len(),
        });
        self.data.extend_from_slice(m.data());
    }
}

fn encode(config: &RunConfig, model: &FlowRec, training: Option<&TrainingParts>) -> Vec<u8> {
    let mut p = Payload {
        entries: Vec::new(),
        data: Vec::new(),
    };
    for (_, name, m) in model.params().iter() {
        p.push(name.to_string(), m);
    }
    let th = training.map(|t| {
        for (id, name, _) in model.params().iter() {
            if let Some(st) = &t.optimizer.state[id] {
                p.push(format!("adam.m/{name}"), &st.m);
                p.push(format!("adam.v/{name}"), &st.v);
            }
        }
        if let Some(best) = &t.best {
            for (_, name, m) in best.iter() {
                p.push(format!("best/{name}"), m);
            }
        }
        TrainingHeader {
            lr: t.optimizer.lr,
            adam_steps: t.optimizer.state.iter().map(|s| s.as_ref().map(|m| m.step)).collect(),
            rngs: t.rngs.clone(),
            progress: t.progress.clone(),
            has_best: t.best.is_some(),
        }
    });
    let header = Header {
        config_hash: config.hash(),
        config: config.clone(),
        model: model.spec().clone(),
        training: th,
        tensors: p.entries,
    };
    let hjson = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(PREFIX + hjson.len() + 8 * p.data.len() + TRAILER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for v in &p.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Model-only checkpoint.
pub fn encode_model(config: &RunConfig, model: &FlowRec) -> Vec<u8> {
    encode(config, model, None)
}

/// Full training state, enough to resume.
pub fn encode_state(config: &RunConfig, state: &TrainState) -> Vec<u8> {
    encode(config, &state.model, Some(&state.training))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX + TRAILER {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let body_end = bytes.len() - TRAILER;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let hend = usize::try_from(hlen)
        .ok()
        .and_then(|h| PREFIX.checked_add(h))
        .filter(|&e| e <= body_end)
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[hend..body_end];
    if payload.len() % 8 != 0 {
        return Err(corrupt("payload is not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if header.config_hash != header.config.hash() {
        return Err(corrupt("config hash does not match embedded config"));
    }

    let mut expected_offset = 0usize;
    let mut tensors = std::collections::HashMap::new();
    for e in &header.tensors {
        let n = e.rows.checked_mul(e.cols).ok_or_else(|| corrupt("tensor size overflows"))?;
        if e.offset != expected_offset || n > values.len() - e.offset.min(values.len()) {
            return Err(corrupt(format!("tensor {} lies outside the payload", e.name)));
        }
        let m = Matrix::from_vec(e.rows, e.cols, values[e.offset..e.offset + n].to_vec());
        if tensors.insert(e.name.clone(), m).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
        expected_offset += n;
    }
    if expected_offset != values.len() {
        return Err(corrupt("payload has trailing values"));
    }

    let spec = header.model;
    let take = |tensors: &mut std::collections::HashMap<String, Matrix>, name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))
    };
    let model_names: Vec<String> = header
        .tensors
        .iter()
        .map(|e| e.name.clone())
        .filter(|n| !n.starts_with("adam.") && !n.starts_with("best/"))
        .collect();
    let mut params = ParamStore::new();
    for name in &model_names {
        let m = take(&mut tensors, name)?;
        params.add(name.clone(), m);
    }
    let model = FlowRec::from_params(spec.config.clone(), spec.num_items, params)?;

    let training = match header.training {
        None => None,
        Some(th) => {
            if th.adam_steps.len() != model.params().len() {
                return Err(corrupt("optimizer state does not match parameter count"));
            }
            let mut state = Vec::with_capacity(th.adam_steps.len());
            for ((_, name, p), step) in model.params().iter().zip(&th.adam_steps) {
                state.push(match step {
                    None => None,
                    Some(step) => {
                        let m = take(&mut tensors, &format!("adam.m/{name}"))?;
                        let v = take(&mut tensors, &format!("adam.v/{name}"))?;
                        if m.shape() != p.shape() || v.shape() != p.shape() {
                            return Err(corrupt(format!("optimizer moments for {name} have the wrong shape")));
                        }
                        Some(Moments { step: *step, m, v })
                    }
                });
            }
            let best = if th.has_best {
                let mut b = ParamStore::new();
                for (_, name, p) in model.params().iter() {
                    let m = take(&mut tensors, &format!("best/{name}"))?;
                    if m.shape() != p.shape() {
                        return Err(corrupt(format!("best copy of {name} has the wrong shape")));
                    }
                    b.add(name, m);
                }
                Some(b)
            } else {
                None
            };
            Some(TrainingParts {
                optimizer: Adam { lr: th.lr, state },
                rngs: th.rngs,
                progress: th.progress,
                best,
            })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        config: header.config,
        model,
        training,
    })
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::dataset::synthetic::MarkovCorpus;
    use crate::dataset::{Dataset, SequenceBatch};
    use crate::sampler::prior_states;
    use crate::trainer::train;

    fn trained() -> (RunConfig, Dataset, TrainState) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            max_len: 5,
            ..Default::default()
        };
        cfg.train.batch_size = 16;
        cfg.train.max_epochs = 2;
        let rows = MarkovCorpus {
            num_users: 50,
            num_items: 15,
            ..Default::default()
        }
        .generate();
        let ds = Dataset::from_interactions(&rows, &cfg.data).unwrap();
        let mut st = TrainState::new(&cfg, ds.num_items()).unwrap();
        train(&mut st, &ds, &cfg, None, |_, _| Ok(())).unwrap();
        (cfg, ds, st)
    }

    #[test]
    fn layout_prefix() {
        let (cfg, _, st) = trained();
        let b = encode_model(&cfg, &st.model);
        assert_eq!(&b[..8], b"FLOWRECK");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let h = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[20..20 + h]).unwrap();
        let n: usize = st.model.params().num_scalars();
        assert_eq!(b.len(), 20 + h + 8 * n + 32);
        assert_eq!(header["tensors"][0]["name"], "item_embedding");
        assert_eq!(header["tensors"][0]["offset"], 0);
    }

    #[test]
    fn state_round_trip_is_lossless() {
        let (cfg, ds, st) = trained();
        let back = decode(&encode_state(&cfg, &st)).unwrap();
        assert_eq!(back.config, cfg);
        let restored = back.into_state().unwrap();
        assert_eq!(restored, st);
        let b = SequenceBatch::from_examples(&ds.split.test, 5);
        assert_eq!(prior_states(&restored.model, &b).unwrap(), prior_states(&st.model, &b).unwrap());
    }

    #[test]
    fn model_only_files_have_no_training_state() {
        let (cfg, _, st) = trained();
        let ck = decode(&encode_model(&cfg, &st.model)).unwrap();
        assert!(ck.training.is_none());
        assert_eq!(ck.model, st.model);
        assert!(ck.into_state().is_err());
    }

    #[test]
    fn truncation_and_bit_flips_are_corrupt() {
        let (cfg, _, st) = trained();
        let b = encode_state(&cfg, &st);
        for cut in [0, 10, 19, 100, b.len() / 2, b.len() - 1] {
            assert!(matches!(decode(&b[..cut]), Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = b.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let (cfg, _, st) = trained();
        let mut b = encode_model(&cfg, &st.model);
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&b), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
    }

    #[test]
    fn dimension_mismatch_is_incompatible() {
        let (cfg, ds, st) = trained();
        let ck = decode(&encode_model(&cfg, &st.model)).unwrap();
        let mut other = cfg.model.clone();
        other.dim = 16;
        assert!(matches!(ck.check_compatible(&other, ds.num_items()), Err(Error::IncompatibleCheckpoint(_))));
        assert!(matches!(ck.check_compatible(&cfg.model, ds.num_items() + 1), Err(Error::IncompatibleCheckpoint(_))));
        ck.check_compatible(&cfg.model, ds.num_items()).unwrap();
    }

    #[test]
    fn save_and_load_files() {
        let (cfg, _, st) = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &encode_state(&cfg, &st)).unwrap();
        assert_eq!(load(&p).unwrap().into_state().unwrap(), st);
        assert!(matches!(load(&dir.path().join("missing.ckpt")), Err(Error::Io { .. })));
    }
}
