//! OLMC checkpoints: parameters, frozen flags, optimizer moments and the
//! training state, bit-exact.
//!
//! Layout (little-endian): magic `OLMC`, version `u32`; metadata (run
//! config hash, label, phase, step, generator seed/stream/word position,
//! running losses, optimizer settings and update count, model config as
//! JSON); the parameter count and one entry per parameter in store order
//! (name, dtype, shape, frozen flag, values, optional first and second
//! moments); the FNV-1a hash of everything before it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use onellm_core::model::{ModelConfig, OneLlm};
use onellm_core::optim::{AdamW, AdamWConfig, Moments};
use onellm_core::pipeline::{Phase, TrainState};
use onellm_core::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, read_tensor, verify_trailer, write_atomic, write_tensor, Reader, Writer};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OLMC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `<run_dir>/ckpt_<step>.olmc`.
pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step}.olmc"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub frozen: bool,
    pub moments: Option<Moments<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Free-form tag, the stage name for CLI runs.
    pub label: String,
    pub model_config: ModelConfig,
    pub state: TrainState,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn capture(model: &OneLlm<f32>, state: &TrainState, config_hash: u64, label: &str) -> Self {
        let entries = model
            .store
            .iter()
            .map(|(id, p)| Entry {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
                frozen: p.frozen,
                moments: state.optimizer.moments.get(id.index()).cloned().flatten(),
            })
            .collect();
        Self {
            config_hash,
            label: label.to_string(),
            model_config: model.config,
            state: state.clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.config_hash);
        w.str(&self.label);
        w.u8(self.state.phase.tag());
        w.u64(self.state.step);
        let rng = &self.state.rng;
        w.bytes(&rng.get_seed());
        w.u64(rng.get_stream());
        w.u128(rng.get_word_pos());
        for r in &self.state.running {
            match r {
                Some(v) => {
                    w.u8(1);
                    w.f64(*v);
                }
                None => {
                    w.u8(0);
                    w.f64(0.0);
                }
            }
        }
        let c = &self.state.optimizer.config;
        for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
            w.f64(v);
        }
        w.u8(c.clip_norm.is_some() as u8);
        w.f64(c.clip_norm.unwrap_or(0.0));
        w.u64(self.state.optimizer.t);
        w.str(&serde_json::to_string(&self.model_config).expect("model config serialises"));
        w.u32(self.entries.len() as u32);
        for e in &self.entries {
            w.str(&e.name);
            write_tensor(&mut w, &e.tensor);
            w.u8(e.frozen as u8);
            match &e.moments {
                Some(m) => {
                    w.u8(1);
                    w.values(&m.m);
                    w.values(&m.v);
                }
                None => w.u8(0),
            }
        }
        w.finish()
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.format("not an OLMC checkpoint"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        verify_trailer(path, bytes)?;
        let r = &mut Reader::new(path, &bytes[..bytes.len() - 8]);
        r.pos = 8;
        let config_hash = r.u64("config hash")?;
        let label = r.str("label")?;
        let ptag = r.u8("phase")?;
        let phase = Phase::from_tag(ptag).ok_or_else(|| r.format(format!("phase tag {ptag}")))?;
        let step = r.u64("step")?;
        let seed: [u8; 32] = r.take(32, "generator seed")?.try_into().expect("32 bytes");
        let stream = r.u64("generator stream")?;
        let word_pos = r.u128("generator position")?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let mut running = [None; 8];
        for slot in running.iter_mut() {
            let present = r.u8("running loss")?;
            let v = r.f64("running loss")?;
            *slot = (present == 1).then_some(v);
        }
        let (beta1, beta2, eps, weight_decay) = (r.f64("beta1")?, r.f64("beta2")?, r.f64("eps")?, r.f64("weight decay")?);
        let clip_present = r.u8("clip")?;
        let clip = r.f64("clip")?;
        let t = r.u64("update count")?;
        let json = r.str("model config")?;
        let model_config: ModelConfig =
            serde_json::from_str(&json).map_err(|e| r.format(format!("model config: {e}")))?;
        let n = r.u32("parameter count")? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        let mut names = BTreeSet::new();
        for _ in 0..n {
            let name = r.str("parameter name")?;
            if !names.insert(name.clone()) {
                return Err(r.format(format!("parameter `{name}` appears twice")));
            }
            let tensor = read_tensor::<f32>(r, &name)?;
            let frozen = r.u8(&name)? == 1;
            let moments = match r.u8(&name)? {
                0 => None,
                _ => Some(Moments {
                    m: r.values(tensor.numel(), &name)?,
                    v: r.values(tensor.numel(), &name)?,
                }),
            };
            entries.push(Entry {
                name,
                tensor,
                frozen,
                moments,
            });
        }
        if r.remaining() != 0 {
            return Err(r.format("trailing bytes after the last parameter"));
        }
        let optimizer = AdamW {
            config: AdamWConfig {
                beta1,
                beta2,
                eps,
                weight_decay,
                clip_norm: (clip_present == 1).then_some(clip),
            },
            t,
            moments: entries.iter().map(|e| e.moments.clone()).collect(),
        };
        Ok(Self {
            config_hash,
            label,
            model_config,
            state: TrainState {
                phase,
                step,
                rng,
                optimizer,
                running,
            },
            entries,
        })
    }

    /// Copies parameters and frozen flags into `model` and returns the
    /// training state. Every parameter of the model must be present with
    /// the same shape, and the file must hold nothing else.
    pub fn apply(&self, path: &Path, model: &mut OneLlm<f32>) -> Result<TrainState> {
        let param = |name: &str, detail: String| Error::Parameter {
            path: path.to_path_buf(),
            name: name.to_string(),
            detail,
        };
        if self.entries.len() != model.store.len() {
            for (_, p) in model.store.iter() {
                if !self.entries.iter().any(|e| e.name == p.name) {
                    return Err(param(&p.name, "is missing from the checkpoint".into()));
                }
            }
        }
        let mut moments = vec![None; model.store.len()];
        for e in &self.entries {
            let id = model
                .store
                .id(&e.name)
                .ok_or_else(|| param(&e.name, "is not part of this model".into()))?;
            let want = model.store.tensor(id).shape().to_vec();
            if want != e.tensor.shape() {
                return Err(param(&e.name, format!("has shape {:?} in the checkpoint, {want:?} in the model", e.tensor.shape())));
            }
            model.store.assign(id, &e.tensor)?;
            model.store.get_mut(id).frozen = e.frozen;
            moments[id.index()] = e.moments.clone();
        }
        let mut state = self.state.clone();
        state.optimizer.moments = moments;
        Ok(state)
    }

    /// A model built from the stored config with the stored weights.
    pub fn restore(&self, path: &Path) -> Result<(OneLlm<f32>, TrainState)> {
        let mut model = OneLlm::new(self.model_config, 0)?;
        let state = self.apply(path, &mut model)?;
        Ok((model, state))
    }
}

pub fn save(model: &OneLlm<f32>, state: &TrainState, config_hash: u64, label: &str, path: &Path) -> Result<()> {
    write_atomic(path, &Checkpoint::capture(model, state, config_hash, label).to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    Checkpoint::from_bytes(path, &bytes)
}

/// Restores `model` from `path` and returns the saved training state.
pub fn load(path: &Path, model: &mut OneLlm<f32>) -> Result<TrainState> {
    read_checkpoint(path)?.apply(path, model)
}
